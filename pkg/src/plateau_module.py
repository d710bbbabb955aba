"""
Plateau Module
Exact discrete s-minimal sets in a bounded domain by minimum s-t cut.

Free cells (centers in the domain) carry binary labels; everything else is
fixed by the exterior datum. Label 1 means the cell belongs to the set.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import maxflow
import numpy as np
import psutil
from scipy import ndimage, signal

from .errors import PlateauError, UnreachableVolumeError, ValidationError
from .geometry_module import (
    Complement,
    FullSpace,
    GridSpec,
    HalfSpace,
    ShapeExpr,
    Translate,
    VoxelSet,
    save_voxels,
    voxelize,
)
from .quadrature_module import (
    KernelParams,
    QuadratureOptions,
    exterior_cell_potential,
    full_offset_table,
    lattice_table,
)

logger = logging.getLogger(__name__)

# Rough BK memory per directed edge and per node, in bytes
_EDGE_BYTES = 64
_NODE_BYTES = 96


@dataclass(frozen=True)
class PlateauOptions:
    debug_checks: bool = False
    seed: int = 0
    memory_fraction: float = 0.5      # share of available RAM the graph may use
    volume_rel_tol: float = 0.02      # fixed volume: tolerance 0.02 * target + one cell
    mu_bisection_steps: int = 60
    proximal_max_steps: int = 40
    proximal_max_growth: float = 8.0  # tau stops doubling past this multiple

    @staticmethod
    def from_config(section: Dict) -> "PlateauOptions":
        known = PlateauOptions.__dataclass_fields__
        return PlateauOptions(**{k: v for k, v in section.items() if k in known})


@dataclass(frozen=True, eq=False)
class PlateauProblem:
    grid: GridSpec
    omega: ShapeExpr
    exterior_datum: ShapeExpr
    kernel: KernelParams
    pair_cutoff: float
    quadrature: QuadratureOptions = field(default_factory=QuadratureOptions)
    subsamples: int = 4

    def __post_init__(self):
        if not self.grid.n == self.omega.dim == self.exterior_datum.dim == self.kernel.n:
            raise ValidationError("plateau", "grid, omega, datum and kernel dimensions differ")
        if not self.pair_cutoff > 0:
            raise ValidationError("plateau.pair_cutoff", "must be positive")
        if not self.free.any():
            raise ValidationError("omega", "no cell center lies in the domain")

    @classmethod
    def around(cls, omega: ShapeExpr, datum: ShapeExpr, kernel: KernelParams, cells: int = 48,
               margin: int = 8, pair_cutoff: Optional[float] = None,
               quadrature: Optional[QuadratureOptions] = None, subsamples: int = 4) -> "PlateauProblem":
        """Grid with `cells` across the domain box and a fixed ring of `margin` cells."""
        box = omega.bounds()
        if box is None:
            raise ValidationError("omega", "domain must be bounded")
        lo, hi = box
        h = (hi - lo) / cells
        grid = GridSpec(tuple(lo - margin * h), tuple(hi + margin * h),
                        tuple([cells + 2 * margin] * omega.dim))
        cutoff = pair_cutoff if pair_cutoff is not None else 0.5 * float(np.linalg.norm(hi - lo))
        return cls(grid, omega, datum, kernel, cutoff, quadrature or QuadratureOptions(), subsamples)

    @cached_property
    def free(self) -> np.ndarray:
        centers = self.grid.centers()
        return self.omega.contains(centers.reshape(-1, self.grid.n)).reshape(self.grid.cells)

    @cached_property
    def datum_voxels(self) -> VoxelSet:
        return voxelize(self.exterior_datum, self.grid, self.subsamples)

    @property
    def free_volume(self) -> float:
        return float(self.free.sum()) * self.grid.cell_volume

    def to_json(self) -> Dict:
        return {
            "grid": self.grid.to_json(),
            "omega": self.omega.to_json(),
            "exterior_datum": self.exterior_datum.to_json(),
            "kernel": self.kernel.to_json(),
            "pair_cutoff": self.pair_cutoff,
            "free_cells": int(self.free.sum()),
        }


def _shifted(mask: np.ndarray, delta: Sequence[int]) -> np.ndarray:
    """out[p] = mask[p + delta], zero where p + delta leaves the array."""
    out = np.zeros_like(mask)
    dst, src = [], []
    for d, size in zip(delta, mask.shape):
        if abs(d) >= size:
            return out
        dst.append(slice(max(0, -d), size - max(0, d)))
        src.append(slice(max(0, d), size - max(0, -d)))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _positive_offsets(grid: GridSpec, cutoff: float, extent: Sequence[int]) -> List[Tuple[int, ...]]:
    ranges = [range(-(e - 1), e) for e in extent]
    out = []
    for delta in product(*ranges):
        first = next((d for d in delta if d != 0), 0)
        if first > 0 and np.linalg.norm(np.asarray(delta) * grid.h) <= cutoff:
            out.append(delta)
    return out


@dataclass(frozen=True, eq=False)
class CutGraph:
    """
    Capacities of the s-t graph over the bounding subgrid of the free cells.

    unary_one[i] is paid when cell i takes label 1, unary_zero[i] when it
    takes label 0; each kept offset contributes weight * [labels differ].
    """

    problem: PlateauProblem
    window: Tuple[slice, ...]
    free: np.ndarray
    unary_one: np.ndarray
    unary_zero: np.ndarray
    unary_error: float
    offsets: Tuple[Tuple[int, ...], ...]
    weights: Tuple[float, ...]
    dropped_bound: float
    edge_count: int

    def cut_value(self, labels: np.ndarray) -> float:
        """Cut capacity at a full-grid labeling; the labeling-independent constant is 0."""
        u = np.asarray(labels, dtype=bool)[self.window] & self.free
        total = [math.fsum(self.unary_one[u]), math.fsum(self.unary_zero[self.free & ~u])]
        for delta, w in zip(self.offsets, self.weights):
            both = self.free & _shifted(self.free, delta)
            total.append(w * float(np.count_nonzero(both & (u != _shifted(u, delta)))))
        return math.fsum(total)

    def minimize(self, extra_one: Optional[np.ndarray] = None,
                 extra_zero: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
        """
        Min cut with optional extra unary costs (which may be negative).

        Returns:
            (full-grid labels, minimum energy including the extras)
        """
        one = self.unary_one + (0.0 if extra_one is None else extra_one)
        zero = self.unary_zero + (0.0 if extra_zero is None else extra_zero)
        shift = np.minimum(np.minimum(one, zero), 0.0)
        one, zero = np.where(self.free, one - shift, 0.0), np.where(self.free, zero - shift, 0.0)
        g = maxflow.Graph[float]()
        nodeids = g.add_grid_nodes(self.free.shape)
        for delta, w in zip(self.offsets, self.weights):
            structure = np.zeros([2 * abs(d) + 1 for d in delta])
            structure[tuple(abs(d) + d for d in delta)] = 1.0
            edge_w = w * (self.free & _shifted(self.free, delta))
            g.add_grid_edges(nodeids, weights=edge_w, structure=structure, symmetric=True)
        g.add_grid_tedges(nodeids, zero, one)
        flow = g.maxflow()
        # label 0 is exactly the set joined to the label-0 terminal in the residual graph;
        # cells joined to neither terminal take label 1
        sub = ~np.asarray(g.get_grid_segments(nodeids), dtype=bool) & self.free
        labels = np.zeros(self.problem.grid.cells, dtype=bool)
        labels[self.window] = sub
        return labels, float(flow) + math.fsum(shift[self.free])


def _window(free: np.ndarray) -> Tuple[slice, ...]:
    idx = np.argwhere(free)
    return tuple(slice(int(a), int(b) + 1) for a, b in zip(idx.min(axis=0), idx.max(axis=0)))


def _fixed_sums(values: np.ndarray, w_full: np.ndarray) -> np.ndarray:
    """sum_j values_j W(i - j) for every cell i."""
    full = signal.convolve(values, w_full, mode="full")
    cells = values.shape
    return full[tuple(slice(c - 1, 2 * c - 1) for c in cells)]


def _unaries(p: PlateauProblem) -> Tuple[np.ndarray, np.ndarray, float]:
    grid, k = p.grid, p.kernel
    weights, _ = lattice_table(grid, k, p.quadrature)
    w_full = full_offset_table(weights)
    free = p.free
    datum = p.datum_voxels
    occ = np.where(free, 0.0, datum.occupancy)
    fixed_c = np.where(free, 0.0, 1.0 - datum.occupancy)
    near_one = np.maximum(_fixed_sums(fixed_c, w_full), 0.0)
    near_zero = np.maximum(_fixed_sums(occ, w_full), 0.0)
    phi_d, err_d = exterior_cell_potential(datum, free, k, p.quadrature)
    everything = VoxelSet(grid, np.ones(grid.cells), FullSpace(grid.n))
    phi_all, err_all = exterior_cell_potential(everything, free, k, p.quadrature)
    vol = grid.cell_volume
    one = (near_one + np.maximum(phi_all - phi_d, 0.0) * vol) * free
    zero = (near_zero + phi_d * vol) * free
    error = float(np.sum((err_d + err_all) * free)) * vol
    return one, zero, error


def assemble_graph(p: PlateauProblem, options: Optional[PlateauOptions] = None) -> CutGraph:
    """
    Build capacities for the discrete Per_s(E, Omega).

    Pairs of free cells farther apart than the cutoff are dropped; their
    total weight is reported as dropped_bound.
    """
    options = options or PlateauOptions()
    grid = p.grid
    window = _window(p.free)
    free = p.free[window]
    extent = free.shape
    offsets = _positive_offsets(grid, p.pair_cutoff, extent)
    dense_pairs = int(free.sum()) * (int(free.sum()) - 1) // 2
    logger.info(f"[PLATEAU] {int(free.sum())} free cells, {dense_pairs} dense pairs, "
                f"{len(offsets)} offsets within cutoff {p.pair_cutoff:g}")
    estimate = 2 * len(offsets) * free.size * _EDGE_BYTES + free.size * _NODE_BYTES
    available = psutil.virtual_memory().available
    if estimate > options.memory_fraction * available:
        raise PlateauError(f"graph needs ~{estimate / 1e9:.2f} GB, "
                           f"only {available / 1e9:.2f} GB available")
    table, _ = lattice_table(grid, p.kernel, p.quadrature)
    edge_weights = tuple(float(table[tuple(abs(d) for d in delta)]) for delta in offsets)
    edge_count = sum(int(np.count_nonzero(free & _shifted(free, d))) for d in offsets)
    autocorr = np.rint(signal.correlate(free.astype(float), free.astype(float), mode="full"))
    sub_table = table[tuple(slice(0, e) for e in extent)]
    beyond = full_offset_table(sub_table)
    centre = np.stack(np.meshgrid(*[np.arange(-(e - 1), e) for e in extent], indexing="ij"), axis=-1)
    beyond = np.where(np.linalg.norm(centre * grid.h, axis=-1) > p.pair_cutoff, beyond, 0.0)
    dropped = 0.5 * math.fsum((beyond * autocorr).ravel())
    one, zero, unary_error = _unaries(p)
    if np.any(one < 0) or np.any(zero < 0) or any(w < 0 for w in edge_weights):
        raise PlateauError("negative capacity")
    graph = CutGraph(p, window, free, one[window], zero[window], unary_error, tuple(offsets),
                     edge_weights, dropped, edge_count)
    if options.debug_checks:
        rng = np.random.default_rng(options.seed)
        for _ in range(3):
            labels = np.zeros(grid.cells, dtype=bool)
            labels[p.free] = rng.random(int(p.free.sum())) < 0.5
            cut, energy = graph.cut_value(labels), discrete_energy(p, labels)
            if abs(cut - energy) > 1e-10 * max(1.0, abs(energy)):
                raise PlateauError(f"cut/energy identity violated: {cut!r} vs {energy!r}")
        logger.info("[PLATEAU] cut/energy identity verified on 3 random labelings")
    return graph


def discrete_energy(p: PlateauProblem, labels: np.ndarray) -> float:
    """Discrete Per_s(E, Omega) evaluated pair by pair, independently of the graph."""
    grid = p.grid
    labels = np.asarray(labels, dtype=bool)
    table, _ = lattice_table(grid, p.kernel, p.quadrature)
    free_idx = np.argwhere(p.free)
    lab = labels[p.free]
    terms = []
    for start in range(0, len(free_idx), 512):
        block = free_idx[start:start + 512]
        delta = np.abs(block[:, None, :] - free_idx[None, :, :])
        w = table[tuple(np.moveaxis(delta, -1, 0))]
        near = np.linalg.norm(delta * grid.h, axis=-1) <= p.pair_cutoff
        differ = lab[start:start + 512, None] != lab[None, :]
        terms.append(0.5 * math.fsum((w * (near & differ)).ravel()))
    fixed_idx = np.argwhere(~p.free)
    occ = p.datum_voxels.occupancy[~p.free]
    phi_d, _ = exterior_cell_potential(p.datum_voxels, p.free, p.kernel, p.quadrature)
    everything = VoxelSet(grid, np.ones(grid.cells), FullSpace(grid.n))
    phi_all, _ = exterior_cell_potential(everything, p.free, p.kernel, p.quadrature)
    vol = grid.cell_volume
    for start in range(0, len(free_idx), 512):
        block = free_idx[start:start + 512]
        w = table[tuple(np.moveaxis(np.abs(block[:, None, :] - fixed_idx[None, :, :]), -1, 0))]
        mine = lab[start:start + 512]
        to_complement = w @ (1.0 - occ)
        to_datum = w @ occ
        idx = tuple(block.T)
        far_c = np.maximum(phi_all[idx] - phi_d[idx], 0.0) * vol
        far_d = phi_d[idx] * vol
        terms.append(math.fsum(np.where(mine, to_complement + far_c, to_datum + far_d)))
    return math.fsum(terms)


def exhaustive_minimum(p: PlateauProblem, max_cells: int = 20) -> Tuple[np.ndarray, float]:
    """Minimum of the discrete energy by enumerating every labeling of the free cells."""
    count = int(p.free.sum())
    if count > max_cells:
        raise ValidationError("omega", f"{count} free cells exceed the enumeration limit {max_cells}")
    graph = assemble_graph(p)
    best_labels, best = None, math.inf
    for bits in range(2 ** count):
        labels = np.zeros(p.grid.cells, dtype=bool)
        labels[p.free] = [(bits >> i) & 1 == 1 for i in range(count)]
        energy = graph.cut_value(labels)
        if energy < best:
            best_labels, best = labels, energy
    return best_labels, best


# ==================== SOLUTIONS ====================

def _reference_plane(datum: ShapeExpr) -> Optional[Tuple[np.ndarray, float]]:
    """(normal, offset) when the datum is the half-space normal . x > offset."""
    if isinstance(datum, HalfSpace):
        return np.asarray(datum.normal), datum.offset
    if isinstance(datum, Translate):
        inner = _reference_plane(datum.arg)
        if inner is not None:
            return inner[0], inner[1] + float(inner[0] @ np.asarray(datum.vector))
    if isinstance(datum, Complement):
        inner = _reference_plane(datum.arg)
        if inner is not None:
            return -inner[0], -inner[1]
    return None


def flatness(p: PlateauProblem, labels: np.ndarray) -> Optional[int]:
    """Largest distance, in cell layers, of a cell disagreeing with the straight continuation."""
    plane = _reference_plane(p.exterior_datum)
    if plane is None:
        return None
    normal, offset = plane
    centers = p.grid.centers()[p.free]
    side = centers @ normal - offset
    disagree = (side > 0) != np.asarray(labels, dtype=bool)[p.free]
    if not disagree.any():
        return 0
    h = float(p.grid.h.min())
    return int(np.max(np.floor(np.abs(side[disagree]) / h)) + 1)


def boundary_trace_gap(p: PlateauProblem, labels: np.ndarray) -> np.ndarray:
    """
    |label - datum occupancy averaged over fixed face neighbours| on free
    cells touching the fixed region; NaN elsewhere.
    """
    free = p.free
    occ = p.datum_voxels.occupancy
    labels = np.asarray(labels, dtype=bool)
    total = np.zeros(free.shape)
    count = np.zeros(free.shape)
    for axis in range(p.grid.n):
        for step in (-1, 1):
            delta = [0] * p.grid.n
            delta[axis] = step
            neighbour_fixed = _shifted(~free, delta)
            total += np.where(neighbour_fixed, _shifted(occ, delta), 0.0)
            count += neighbour_fixed
    gap = np.full(free.shape, np.nan)
    touching = free & (count > 0)
    gap[touching] = np.abs(labels[touching] - total[touching] / count[touching])
    return gap


@dataclass(frozen=True, eq=False)
class PlateauSolution:
    problem: PlateauProblem
    labels: np.ndarray
    energy: float
    dropped_bound: float
    unary_error: float
    flatness: Optional[int]
    boundary_trace_gap: np.ndarray
    edge_count: int
    mu: Optional[float] = None
    target_volume: Optional[float] = None
    mu_tol: Optional[float] = None
    details: Dict = field(default_factory=dict)

    @property
    def volume(self) -> float:
        return float(self.labels[self.problem.free].sum()) * self.problem.grid.cell_volume

    @property
    def max_trace_gap(self) -> float:
        gap = self.boundary_trace_gap
        return float(np.nanmax(gap)) if np.isfinite(gap).any() else 0.0

    def to_json(self) -> Dict:
        gap = self.boundary_trace_gap
        report = {
            "energy": {"value": self.energy, "error_bound": self.dropped_bound + self.unary_error},
            "dropped_pair_bound": {"value": self.dropped_bound, "error_bound": 0.0},
            "flatness_cells": self.flatness,
            "boundary_trace_gap": {
                "max": self.max_trace_gap,
                "cells_with_gap": int(np.sum(np.nan_to_num(gap) > 0)),
                "map": [[int(i) for i in idx] + [float(gap[tuple(idx)])]
                        for idx in np.argwhere(np.isfinite(gap))],
            },
            "volume": {"value": self.volume, "tolerance": self.problem.grid.cell_volume},
            "edges": self.edge_count,
            "free_cells": int(self.problem.free.sum()),
        }
        if self.target_volume is not None:
            report["target_volume"] = {"value": self.target_volume, "error_bound": 0.0}
            report["mu"] = {"value": self.mu, "tolerance": self.mu_tol}
        report.update(self.details)
        return report


def _solution(p: PlateauProblem, graph: CutGraph, labels: np.ndarray, **extra) -> PlateauSolution:
    energy = graph.cut_value(labels)
    return PlateauSolution(p, labels, energy, graph.dropped_bound, graph.unary_error,
                           flatness(p, labels), boundary_trace_gap(p, labels), graph.edge_count, **extra)


def solve_plateau(p: PlateauProblem, options: Optional[PlateauOptions] = None) -> PlateauSolution:
    """Global minimizer of the discrete energy (submodular, so the min cut is exact)."""
    options = options or PlateauOptions()
    graph = assemble_graph(p, options)
    labels, flow = graph.minimize()
    solution = _solution(p, graph, labels)
    if abs(flow - solution.energy) > 1e-8 * max(1.0, abs(solution.energy)):
        raise PlateauError(f"max-flow value {flow!r} disagrees with the cut {solution.energy!r}")
    logger.info(f"[PLATEAU] energy {solution.energy:.8g} (+{graph.dropped_bound:.2g} dropped), "
                f"flatness {solution.flatness}, max trace gap {solution.max_trace_gap:.3g}")
    return solution


# ==================== FIXED VOLUME ====================

def _volume_of(p: PlateauProblem, labels: np.ndarray) -> float:
    return float(labels[p.free].sum()) * p.grid.cell_volume


def _closest(path: List[Tuple[float, np.ndarray, float]], target: float) -> Tuple[float, np.ndarray, float]:
    """Entry of (mu, labels, volume) closest to target; ties go to the smaller volume."""
    return min(path, key=lambda e: (abs(e[2] - target), e[2]))


def _mu_search(graph: CutGraph, p: PlateauProblem, target: float, lo: float, hi: float, mu_tol: float,
               steps: int, extra_one=None, extra_zero=None) -> List[Tuple[float, np.ndarray, float]]:
    cell = p.grid.cell_volume
    path = []

    def solve(mu):
        one = -mu * cell * np.ones_like(graph.unary_one)
        if extra_one is not None:
            one = one + extra_one
        labels, _ = graph.minimize(one, extra_zero)
        entry = (mu, labels, _volume_of(p, labels))
        path.append(entry)
        return entry

    solve(lo)
    solve(hi)
    for _ in range(steps):
        if hi - lo <= mu_tol:
            break
        mid = 0.5 * (lo + hi)
        _, _, vol = solve(mid)
        if vol == target:
            break
        if vol < target:
            lo = mid
        else:
            hi = mid
    return path


def _box_seed(p: PlateauProblem, target: float) -> np.ndarray:
    """target/h^n free cells nearest (in max-norm) to the centroid of the free region."""
    count = int(round(target / p.grid.cell_volume))
    centers = p.grid.centers()
    free_idx = np.argwhere(p.free)
    pts = centers[p.free]
    centroid = pts.mean(axis=0)
    order = np.lexsort((np.linalg.norm(pts - centroid, axis=1), np.max(np.abs(pts - centroid), axis=1)))
    seed = np.zeros(p.grid.cells, dtype=bool)
    seed[tuple(free_idx[order[:count]].T)] = True
    return seed


def solve_fixed_volume(p: PlateauProblem, target_volume: float, mu_tol: float = 1e-6,
                       options: Optional[PlateauOptions] = None) -> PlateauSolution:
    """
    Minimizer of Per_s(E, Omega) - mu |E| with |E| near target_volume.

    Bisection over mu first; when the mu-path jumps over the target, a
    proximal stage starting from a box of the target volume follows, adding
    a distance-to-interface penalty and re-bisecting mu at every step.
    """
    options = options or PlateauOptions()
    if not 0.0 <= target_volume <= p.free_volume + 1e-12:
        raise ValidationError("target_volume", f"must lie in [0, {p.free_volume:g}]")
    grid = p.grid
    cell = grid.cell_volume
    tol = options.volume_rel_tol * target_volume + cell
    graph = assemble_graph(p, options)
    pair_sum = sum(graph.weights) * 2.0
    reach = (float(max(graph.unary_one.max(), graph.unary_zero.max())) + 2.0 * pair_sum) / cell + 1.0
    path = _mu_search(graph, p, target_volume, -reach, reach, mu_tol, options.mu_bisection_steps)
    ordered = sorted((e[0], e[2]) for e in path)
    mu_path = [[m, v] for m, v in ordered]
    if any(b[1] < a[1] for a, b in zip(ordered, ordered[1:])):
        logger.warning("[PLATEAU] volume along the mu-path is not monotone")
    mu, labels, vol = _closest(path, target_volume)
    if abs(vol - target_volume) <= tol:
        logger.info(f"[PLATEAU] volume {vol:.6g} reached by mu-bisection (mu={mu:.6g})")
        return _solution(p, graph, labels, mu=mu, target_volume=target_volume, mu_tol=mu_tol,
                         details={"phase": "bisection", "mu_path": mu_path})
    below = max((e for e in path if e[2] < target_volume), key=lambda e: e[2], default=None)
    above = min((e for e in path if e[2] > target_volume), key=lambda e: e[2], default=None)
    logger.info("[PLATEAU] mu-path jumps over the target; starting proximal refinement")

    current = _box_seed(p, target_volume)
    seed_energy = graph.cut_value(current)
    n, s = grid.n, p.kernel.s
    mu_est = max((n - s) / n * seed_energy / max(_volume_of(p, current), cell), 1e-12)
    tau0 = 2.0 * float(grid.h.min()) / mu_est
    tau = tau0
    steps = 0
    best = (abs(_volume_of(p, current) - target_volume), current, mu_est)
    while steps < options.proximal_max_steps:
        steps += 1
        outside = ndimage.distance_transform_edt(~current, sampling=grid.h)
        inside = ndimage.distance_transform_edt(current, sampling=grid.h)
        extra_one = np.where(current, 0.0, outside)[graph.window] * cell / tau
        extra_zero = np.where(current, inside, 0.0)[graph.window] * cell / tau
        bound = reach + float(max(extra_one.max(), extra_zero.max())) / cell
        step_path = _mu_search(graph, p, target_volume, -bound, bound, mu_tol,
                               options.mu_bisection_steps, extra_one, extra_zero)
        mu, labels, vol = _closest(step_path, target_volume)
        gap = abs(vol - target_volume)
        if gap <= best[0]:
            best = (gap, labels, mu)
        if np.array_equal(labels, current):
            tau *= 2.0
            if tau > options.proximal_max_growth * tau0:
                break
        else:
            current = labels
    gap, labels, mu = best
    if gap > tol:
        raise UnreachableVolumeError(
            f"target volume {target_volume:g} not reached (closest gap {gap:.3g})",
            bracket=(None if below is None else below[1], None if above is None else above[1]))
    logger.info(f"[PLATEAU] proximal refinement finished after {steps} steps, volume gap {gap:.3g}")
    return _solution(p, graph, labels, mu=mu, target_volume=target_volume, mu_tol=mu_tol,
                     details={"phase": "proximal", "proximal_steps": steps, "mu_path": mu_path})


def save_solution(path, solution: PlateauSolution) -> Path:
    """Label grid as a voxel file next to the JSON report."""
    path = Path(path)
    p = solution.problem
    save_voxels(path.with_name(path.stem + "_labels.json"),
                VoxelSet(p.grid, solution.labels.astype(float), p.exterior_datum))
    report = {"problem": p.to_json(), "solution": solution.to_json()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
