"""
Quadrature Module
Kernel-weighted set interactions s(1-s) * int_A int_B |x-y|^-(n+s) dy dx.

Cell pairs use the difference variable z = y - x, where the box-box
integral becomes a triangle-weighted integral of the kernel. Separated
pairs run a Gauss-Legendre ladder on that variable: the order doubles
until two rungs agree to near_field_rel_tol, and once the order caps the
box is subdivided. The integrand is smooth there, so the ladder converges
far faster than a subdivided midpoint rule. Touching pairs carry the
singularity and are solved separately. Regions outside a grid box are
handled by polar integration along rays.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
from scipy import signal

from .errors import (
    DimensionMismatchError,
    DivergentIntegralError,
    QuadratureError,
    ValidationError,
)
from .geometry_module import (
    GridSpec,
    ShapeExpr,
    VoxelSet,
    box_inside,
    cone_aperture,
    grid_around,
    shape_extent,
    voxelize,
)

logger = logging.getLogger(__name__)

UNIT_BALL_VOLUME = {0: 1.0, 1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}

# Doubles materialized per vectorized batch
_ROW_BUDGET = 1 << 22

_workers = 1


def set_worker_count(k: int) -> int:
    """Set the thread count for fan-out work; 0 picks the physical core count."""
    global _workers
    if k < 0:
        raise ValidationError("threads", "must be >= 0")
    if k == 0:
        k = psutil.cpu_count(logical=False) or 1
    _workers = int(k)
    logger.debug(f"[QUADRATURE] worker count set to {_workers}")
    return _workers


def ordered_map(func: Callable, items: Iterable) -> List:
    """Map in input order, on the worker pool when more than one worker is set."""
    items = list(items)
    if _workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=_workers) as pool:
        return list(pool.map(func, items))


# ==================== PARAMETERS ====================

@dataclass(frozen=True)
class KernelParams:
    """Dimension and fractional order of the kernel |x-y|^-(n+s)."""

    n: int
    s: float

    def __post_init__(self):
        if self.n not in (1, 2, 3):
            raise ValidationError("kernel.n", f"dimension {self.n} not in 1..3")
        if not 0.0 < float(self.s) < 1.0:
            raise ValidationError("kernel.s", f"s = {self.s} must lie in (0, 1)")
        object.__setattr__(self, "s", float(self.s))

    @property
    def normalization(self) -> float:
        return self.s * (1.0 - self.s)

    @property
    def omega_n(self) -> float:
        return UNIT_BALL_VOLUME[self.n]

    @property
    def sphere_area(self) -> float:
        return self.n * UNIT_BALL_VOLUME[self.n]

    def with_s(self, s: float) -> "KernelParams":
        return KernelParams(self.n, s)

    def to_json(self) -> Dict:
        return {"n": self.n, "s": self.s, "normalization": self.normalization, "omega_n": self.omega_n}


@dataclass(frozen=True)
class QuadratureOptions:
    near_field_rel_tol: float = 1e-6
    far_cutoff: Optional[float] = None     # None: far_cutoff_factor * box diameter
    far_cutoff_factor: float = 8.0
    max_subdivision_depth: int = 12
    angular_nodes: int = 256
    radial_nodes: int = 32
    bisection_steps: int = 40
    exterior_gauss: int = 2

    def __post_init__(self):
        if not self.near_field_rel_tol > 0:
            raise ValidationError("quadrature.near_field_rel_tol", "must be positive")
        if self.far_cutoff is not None and not self.far_cutoff > 0:
            raise ValidationError("quadrature.far_cutoff", "must be positive")
        if not self.far_cutoff_factor > 1:
            raise ValidationError("quadrature.far_cutoff_factor", "must exceed 1")
        if self.max_subdivision_depth < 1:
            raise ValidationError("quadrature.max_subdivision_depth", "must be >= 1")
        if self.angular_nodes < 8 or self.radial_nodes < 4:
            raise ValidationError("quadrature.angular_nodes", "angular >= 8 and radial >= 4 required")
        if self.exterior_gauss < 1 or self.bisection_steps < 1:
            raise ValidationError("quadrature.exterior_gauss", "must be >= 1")

    def far_radius(self, diameter: float) -> float:
        if self.far_cutoff is not None:
            return max(self.far_cutoff, diameter)
        return self.far_cutoff_factor * max(diameter, 1e-12)

    @staticmethod
    def from_config(section: Dict) -> "QuadratureOptions":
        known = QuadratureOptions.__dataclass_fields__
        return QuadratureOptions(**{k: v for k, v in section.items() if k in known})


@dataclass(frozen=True)
class InteractionEstimate:
    value: float
    error_bound: float = 0.0

    def __add__(self, other: "InteractionEstimate") -> "InteractionEstimate":
        return InteractionEstimate(self.value + other.value, self.error_bound + other.error_bound)

    def scaled(self, factor: float) -> "InteractionEstimate":
        return InteractionEstimate(self.value * factor, self.error_bound * abs(factor))

    def to_json(self) -> Dict:
        return {"value": self.value, "error_bound": self.error_bound}


ZERO = InteractionEstimate(0.0, 0.0)


# ==================== BOX-PAIR WEIGHTS ====================

@lru_cache(maxsize=None)
def _gauss(q: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(q)


def _order_ladder(n: int) -> Tuple[int, ...]:
    return (1, 2, 3, 4, 6, 8, 12, 16) if n <= 2 else (1, 2, 3, 4, 6, 8)


def _axis_nodes(lo1, hi1, lo2, hi2, q: int, splits: int):
    """Nodes and triangle-weighted weights along one axis of the difference variable."""
    m = lo1.shape[0]
    knots = np.sort(np.stack([lo2 - hi1, lo2 - lo1, hi2 - hi1, hi2 - lo1], axis=1), axis=1)
    scale = np.abs(knots).max() + 1.0
    pieces = (0, 2) if np.all(knots[:, 2] - knots[:, 1] <= 1e-15 * scale) else (0, 1, 2)
    x, w = _gauss(q)
    frac = np.arange(splits + 1) / splits
    nodes, weights = [], []
    for p in pieces:
        a, b = knots[:, p:p + 1], knots[:, p + 1:p + 2]
        edges = a + (b - a) * frac
        mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
        half = 0.5 * (edges[:, 1:] - edges[:, :-1])
        nodes.append((mid[:, :, None] + half[:, :, None] * x).reshape(m, -1))
        weights.append((half[:, :, None] * w).reshape(m, -1))
    z = np.concatenate(nodes, axis=1)
    wt = np.concatenate(weights, axis=1)
    overlap = np.minimum(hi1[:, None], hi2[:, None] - z) - np.maximum(lo1[:, None], lo2[:, None] - z)
    return z, wt * np.maximum(overlap, 0.0)


def _rows_once(lo1, hi1, lo2, hi2, s: float, q: int, splits: int) -> np.ndarray:
    m, n = lo1.shape
    r2 = np.zeros([m] + [1] * n)
    wt = np.ones([m] + [1] * n)
    for k in range(n):
        z, w = _axis_nodes(lo1[:, k], hi1[:, k], lo2[:, k], hi2[:, k], q, splits)
        shape = [m] + [1] * n
        shape[k + 1] = z.shape[1]
        r2 = r2 + (z * z).reshape(shape)
        wt = wt * w.reshape(shape)
    vals = wt * r2 ** (-(n + s) / 2.0)
    return vals.reshape(m, -1).sum(axis=-1)


def _rows_chunked(lo1, hi1, lo2, hi2, s, q, splits) -> np.ndarray:
    n = lo1.shape[1]
    per_row = (3 * splits * q) ** n
    step = max(1, _ROW_BUDGET // per_row)
    out = np.empty(lo1.shape[0])
    for start in range(0, lo1.shape[0], step):
        sl = slice(start, start + step)
        out[sl] = _rows_once(lo1[sl], hi1[sl], lo2[sl], hi2[sl], s, q, splits)
    return out


def box_rows(lo1, hi1, lo2, hi2, s: float, opts: QuadratureOptions) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unnormalized box-box integrals for separated box pairs, one per row.

    Escalates the Gauss-Legendre order until consecutive estimates agree to
    near_field_rel_tol, then subdivides the pieces.

    Returns:
        (values, error_bounds) without the s(1-s) factor
    """
    lo1, hi1, lo2, hi2 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (lo1, hi1, lo2, hi2))
    m, n = lo1.shape
    tol = opts.near_field_rel_tol
    value = np.zeros(m)
    error = np.zeros(m)
    pending = np.arange(m)
    prev = None
    ladder = _order_ladder(n)
    for q in ladder:
        cur = _rows_chunked(lo1[pending], hi1[pending], lo2[pending], hi2[pending], s, q, 1)
        if prev is not None:
            diff = np.abs(cur - prev)
            ok = diff <= tol * np.abs(cur)
            value[pending[ok]] = cur[ok]
            error[pending[ok]] = diff[ok]
            pending, prev = pending[~ok], cur[~ok]
        else:
            prev = cur
        if pending.size == 0:
            return value, error
    q = ladder[-1]
    splits, depth = 2, 1
    while pending.size and depth <= opts.max_subdivision_depth and (3 * splits * q) ** n <= _ROW_BUDGET:
        cur = _rows_chunked(lo1[pending], hi1[pending], lo2[pending], hi2[pending], s, q, splits)
        diff = np.abs(cur - prev)
        ok = diff <= tol * np.abs(cur)
        value[pending[ok]] = cur[ok]
        error[pending[ok]] = diff[ok]
        pending, prev = pending[~ok], cur[~ok]
        splits, depth = splits * 2, depth + 1
    if pending.size:
        raise QuadratureError(f"{pending.size} box pairs did not reach rel tol {tol:g}")
    return value, error


def _lattice_key(h) -> Tuple[float, ...]:
    return tuple(float(f"{v:.12g}") for v in np.atleast_1d(h))


@lru_cache(maxsize=64)
def _touching_weights(h: Tuple[float, ...], s: float, opts: QuadratureOptions) -> Dict:
    """
    Weights of congruent cells sharing a face, edge or vertex.

    Halving both cells gives W(D) = c * (2^(n-m) W(D) + sum of other children)
    with c = 2^-(n-s) and m the number of non-zero offset components; the
    other children are separated or touch in more components, so solving in
    decreasing m is exact.
    """
    n = len(h)
    hv = np.asarray(h)
    c = 2.0 ** (-(n - s))
    keys = [t for t in product((0, 1), repeat=n) if any(t)]
    corners = list(product((0, 1), repeat=n))
    separated = set()
    for key in keys:
        for b in corners:
            for bp in corners:
                child = tuple(abs(2 * d + y - x) for d, x, y in zip(key, b, bp))
                if max(child) > 1:
                    separated.add(child)
    far_keys = sorted(separated)
    offs = np.asarray(far_keys, dtype=float)
    far_val, far_err = box_rows(np.zeros_like(offs), np.tile(hv, (len(far_keys), 1)),
                                offs * hv, (offs + 1.0) * hv, s, opts)
    table = {key: (v, e) for key, v, e in zip(far_keys, far_val, far_err)}
    solved = {}
    for key in sorted(keys, key=lambda t: (-sum(t), t)):
        m = sum(key)
        rest, rest_err = [], []
        for b in corners:
            for bp in corners:
                child = tuple(abs(2 * d + y - x) for d, x, y in zip(key, b, bp))
                if child == key:
                    continue
                v, e = solved[child] if max(child) <= 1 else table[child]
                rest.append(v)
                rest_err.append(e)
        denom = 1.0 - c * 2.0 ** (n - m)
        solved[key] = (c * math.fsum(rest) / denom, c * math.fsum(rest_err) / denom)
    return solved


def lattice_weights(h, offsets, k: KernelParams, opts: Optional[QuadratureOptions] = None
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pair weights between a cell of size h and its translates by integer offsets.

    Separated offsets use the Gauss-Legendre ladder, touching ones the
    singular solver.

    Returns:
        (weights, error_bounds) including the s(1-s) factor
    """
    opts = opts or QuadratureOptions()
    hk = _lattice_key(h)
    offs = np.abs(np.atleast_2d(np.asarray(offsets, dtype=int)))
    if offs.shape[1] != k.n or len(hk) != k.n:
        raise DimensionMismatchError("offsets", "offset and kernel dimension differ")
    if np.any(offs.max(axis=1) == 0):
        raise ValidationError("offsets", "a cell does not interact with itself")
    values = np.empty(offs.shape[0])
    errors = np.empty(offs.shape[0])
    touching = offs.max(axis=1) <= 1
    if np.any(touching):
        solved = _touching_weights(hk, k.s, opts)
        for i in np.nonzero(touching)[0]:
            values[i], errors[i] = solved[tuple(int(v) for v in offs[i])]
    far = ~touching
    if np.any(far):
        hv = np.asarray(hk)
        d = offs[far].astype(float)
        values[far], errors[far] = box_rows(np.zeros_like(d), np.tile(hv, (d.shape[0], 1)),
                                            d * hv, (d + 1.0) * hv, k.s, opts)
    return values * k.normalization, errors * k.normalization


@lru_cache(maxsize=16)
def _lattice_table_cached(h: Tuple[float, ...], cells: Tuple[int, ...], k: KernelParams,
                          opts: QuadratureOptions) -> Tuple[np.ndarray, np.ndarray]:
    offsets = np.array(list(product(*[range(c) for c in cells])), dtype=int)
    weights = np.zeros(offsets.shape[0])
    errors = np.zeros(offsets.shape[0])
    nonzero = offsets.max(axis=1) > 0
    weights[nonzero], errors[nonzero] = lattice_weights(h, offsets[nonzero], k, opts)
    weights = weights.reshape(cells)
    errors = errors.reshape(cells)
    weights.setflags(write=False)
    errors.setflags(write=False)
    logger.debug(f"[QUADRATURE] lattice table {cells} for h={h}, s={k.s:g}")
    return weights, errors


def lattice_table(grid: GridSpec, k: KernelParams, opts: Optional[QuadratureOptions] = None
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Weights W[|D|] for every cell offset of the grid (entry 0 unused)."""
    if grid.n != k.n:
        raise DimensionMismatchError("grid", "grid and kernel dimension differ")
    return _lattice_table_cached(_lattice_key(grid.h), grid.cells, k, opts or QuadratureOptions())


def full_offset_table(table: np.ndarray) -> np.ndarray:
    """Expand a table indexed by |D| to all signed offsets, zero at the origin."""
    index = np.ix_(*[np.abs(np.arange(-(c - 1), c)) for c in table.shape])
    full = np.array(table[index])
    full[tuple(c - 1 for c in table.shape)] = 0.0
    return full


def cell_box(grid: GridSpec, index: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    lo = grid.lo_array + np.asarray(index) * grid.h
    return lo, lo + grid.h


def pair_weight_estimate(cell_i, cell_j, k: KernelParams,
                         opts: Optional[QuadratureOptions] = None) -> InteractionEstimate:
    """s(1-s) * int_{cell_i} int_{cell_j} |x-y|^-(n+s), with its error bound."""
    opts = opts or QuadratureOptions()
    lo1, hi1 = (np.asarray(v, dtype=float) for v in cell_i)
    lo2, hi2 = (np.asarray(v, dtype=float) for v in cell_j)
    if not lo1.size == hi1.size == lo2.size == hi2.size == k.n:
        raise DimensionMismatchError("cell_j", "cell and kernel dimension differ")
    if np.any(hi1 <= lo1) or np.any(hi2 <= lo2):
        raise ValidationError("cell_j", "cells need positive extent")
    # canonical order makes the result bitwise symmetric
    if (tuple(lo2), tuple(hi2)) < (tuple(lo1), tuple(hi1)):
        lo1, hi1, lo2, hi2 = lo2, hi2, lo1, hi1
    size = hi1 - lo1
    tol = 1e-12 * float(np.max(np.abs(np.concatenate([lo1, hi1, lo2, hi2]))) + 1.0)
    gap = np.maximum(lo1, lo2) - np.minimum(hi1, hi2)
    if np.all(gap < -tol):
        raise ValidationError("cell_j", "cells overlap")
    congruent = np.allclose(hi2 - lo2, size, rtol=1e-12, atol=0.0)
    steps = (lo2 - lo1) / size
    on_lattice = congruent and np.allclose(steps, np.rint(steps), rtol=0.0, atol=1e-9)
    if on_lattice:
        w, e = lattice_weights(size, np.rint(steps).astype(int)[None, :], k, opts)
        return InteractionEstimate(float(w[0]), float(e[0]))
    if np.all(gap <= tol):
        raise QuadratureError("touching cells must be congruent lattice neighbours")
    v, e = box_rows(lo1, hi1, lo2, hi2, k.s, opts)
    return InteractionEstimate(float(v[0]) * k.normalization, float(e[0]) * k.normalization)


def pair_weight(cell_i, cell_j, k: KernelParams, opts: Optional[QuadratureOptions] = None) -> float:
    return pair_weight_estimate(cell_i, cell_j, k, opts).value


# ==================== ANGULAR RULES AND RAYS ====================

@lru_cache(maxsize=32)
def angular_rule(n: int, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Quadrature on the unit sphere S^(n-1).

    Returns:
        directions (M, n), weights (M,), parity (M,) splitting the rule into
        two interleaved half-rules used for error estimates
    """
    if n == 1:
        return np.array([[1.0], [-1.0]]), np.ones(2), np.array([0, 1])
    if n == 2:
        count += count % 2
        phi = (np.arange(count) + 0.5) * 2.0 * math.pi / count
        return (np.stack([np.cos(phi), np.sin(phi)], axis=1),
                np.full(count, 2.0 * math.pi / count), np.arange(count) % 2)
    q = max(2, int(round(math.sqrt(count / 4.0))))
    m_phi = 4 * q
    x, w = _gauss(q)
    cos_t = np.concatenate([(x - 1.0) / 2.0, (x + 1.0) / 2.0])
    w_t = np.concatenate([w, w]) / 2.0
    phi = (np.arange(m_phi) + 0.5) * 2.0 * math.pi / m_phi
    ct, ph = np.meshgrid(cos_t, phi, indexing="ij")
    wt = np.outer(w_t, np.full(m_phi, 2.0 * math.pi / m_phi))
    st = np.sqrt(1.0 - ct ** 2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    parity = np.tile(np.arange(m_phi) % 2, 2 * q)
    return dirs, wt.ravel(), parity


def rule_with_error(values: np.ndarray, weights: np.ndarray, parity: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Apply an angular rule along the last axis; error from the half-rule spread."""
    total = values @ weights
    if values.shape[-1] <= 2:
        return total, np.zeros_like(total)
    even = values @ (weights * 2.0 * (parity == 0))
    odd = values @ (weights * 2.0 * (parity == 1))
    return total, np.abs(even - odd)


def frame_rotation(normal: np.ndarray) -> np.ndarray:
    """Orthogonal matrix whose last column is `normal`."""
    nu = np.asarray(normal, dtype=float)
    n = nu.size
    if n == 1:
        return np.array([[nu[0]]])
    if n == 2:
        return np.array([[nu[1], nu[0]], [-nu[0], nu[1]]])
    helper = np.eye(3)[int(np.argmin(np.abs(nu)))]
    t1 = np.cross(nu, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(nu, t1)
    return np.stack([t1, t2, nu], axis=1)


@dataclass(frozen=True, eq=False)
class RayProfile:
    """
    Membership of a shape along rays, as piecewise-constant radial profiles.

    The profile does not depend on s, so one trace serves a whole s-sweep.
    """

    radii: np.ndarray       # (..., K + 2) breakpoints padded with r_far
    states: np.ndarray      # (..., K + 1) membership on each piece
    far_state: np.ndarray   # (...) membership at r_far
    asymptotic: np.ndarray  # (...) membership as the radius grows without bound
    r_far: float

    def integral(self, s: float) -> np.ndarray:
        """int_{start}^{inf} chi(x + r u) r^(-1-s) dr per ray."""
        pw = self.radii ** (-s)
        inner = np.sum(self.states * (pw[..., :-1] - pw[..., 1:]), axis=-1)
        return (inner + self.asymptotic * self.r_far ** (-s)) / s

    def truncation(self, s: float) -> np.ndarray:
        return np.abs(self.far_state - self.asymptotic) * self.r_far ** (-s) / s


def _trace_block(shape: ShapeExpr, origins, directions, starts, r_far, opts: QuadratureOptions):
    n = origins.shape[-1]
    j = opts.radial_nodes
    frac = np.linspace(0.0, 1.0, j)
    radii = starts[..., None] * (r_far / starts[..., None]) ** frac
    pts = origins[:, None, None, :] + radii[..., None] * directions[:, :, None, :]
    member = shape._inside(pts.reshape(-1, n)).reshape(radii.shape)
    flips = member[..., 1:] != member[..., :-1]
    idx = np.nonzero(flips)
    lo = radii[..., :-1][idx]
    hi = radii[..., 1:][idx]
    lo_state = member[..., :-1][idx]
    if lo.size:
        p_idx, m_idx = idx[0], idx[1]
        for _ in range(opts.bisection_steps):
            mid = 0.5 * (lo + hi)
            probe = origins[p_idx] + mid[:, None] * directions[p_idx, m_idx]
            same = shape._inside(probe) == lo_state
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
    count = flips.sum(axis=-1)
    kmax = int(count.max()) if count.size else 0
    cross = np.full(radii.shape[:-1] + (kmax,), r_far)
    if lo.size:
        pos = np.cumsum(flips, axis=-1)[idx] - 1
        cross[idx[0], idx[1], pos] = 0.5 * (lo + hi)
    breaks = np.concatenate([starts[..., None], cross, np.full(starts.shape + (1,), r_far)], axis=-1)
    parity = np.arange(kmax + 1) % 2
    states = (member[..., :1].astype(int) ^ parity).astype(float)
    return breaks, states, member[..., -1].astype(float)


def trace_rays(shape: ShapeExpr, origins, directions, starts, r_far: float,
               opts: QuadratureOptions) -> RayProfile:
    """
    Locate membership changes of `shape` along rays.

    Args:
        origins: (P, n) ray origins
        directions: (M, n) shared or (P, M, n) per-origin unit directions
        starts: (P, M) start radii (> 0)
        r_far: radius beyond which the asymptotic membership is used
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.asarray(directions, dtype=float)
    if dirs.ndim == 2:
        dirs = np.broadcast_to(dirs, (origins.shape[0],) + dirs.shape)
    starts = np.minimum(np.asarray(starts, dtype=float), r_far)
    starts = np.maximum(starts, 1e-300)
    p, m = starts.shape
    step = max(1, _ROW_BUDGET // (m * opts.radial_nodes * origins.shape[1]))
    chunks = [slice(a, a + step) for a in range(0, p, step)]
    parts = ordered_map(lambda sl: _trace_block(shape, origins[sl], dirs[sl], starts[sl], r_far, opts), chunks)
    width = max(b.shape[-1] for b, _, _ in parts)
    breaks, states, far = [], [], []
    for b, st, fs in parts:
        pad = width - b.shape[-1]
        breaks.append(np.pad(b, [(0, 0), (0, 0), (0, pad)], constant_values=r_far))
        states.append(np.pad(st, [(0, 0), (0, 0), (0, pad)]))
        far.append(fs)
    asym = shape.asymptotic_contains(dirs.reshape(-1, dirs.shape[-1])).reshape(p, m).astype(float)
    return RayProfile(np.concatenate(breaks), np.concatenate(states), np.concatenate(far), asym, r_far)


def exit_distance(points: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Distance from points inside [lo, hi] to the box boundary along each direction, (P, M)."""
    x = points[:, None, :]
    u = directions[None, :, :] if directions.ndim == 2 else directions
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(u > 0, (hi - x) / u, np.where(u < 0, (lo - x) / u, np.inf))
    return np.maximum(t.min(axis=-1), 0.0)


# ==================== EXTERIOR POTENTIALS ====================

def _cell_points(grid: GridSpec, mask: np.ndarray, q: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss points of the masked cells followed by the cell centers."""
    centers = grid.centers()[mask]
    x, w = _gauss(q)
    mesh = np.meshgrid(*([x] * grid.n), indexing="ij")
    offsets = np.stack([g.ravel() for g in mesh], axis=1) * (grid.h / 2.0)
    wmesh = np.meshgrid(*([w / 2.0] * grid.n), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wmesh], axis=1), axis=1)
    pts = np.concatenate([centers[:, None, :] + offsets[None], centers[:, None, :]], axis=1)
    return pts, weights


@lru_cache(maxsize=8)
def _exterior_profile(shape: ShapeExpr, grid: GridSpec, mask_bytes: bytes, opts: QuadratureOptions):
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(grid.cells)
    pts, _ = _cell_points(grid, mask, opts.exterior_gauss)
    flat = pts.reshape(-1, grid.n)
    dirs, _, _ = angular_rule(grid.n, opts.angular_nodes)
    starts = exit_distance(flat, dirs, grid.lo_array, grid.hi_array)
    r_far = opts.far_radius(grid.diameter)
    logger.debug(f"[QUADRATURE] tracing {flat.shape[0]} x {dirs.shape[0]} exterior rays")
    return trace_rays(shape, flat, dirs, starts, r_far, opts)


def exterior_cell_potential(vs: VoxelSet, mask: np.ndarray, k: KernelParams,
                            opts: Optional[QuadratureOptions] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cell averages of s(1-s) * int_{S outside box} |x-y|^-(n+s) dy over masked cells.

    S is the exterior shape of `vs`; the box is its grid box.

    Returns:
        (averages, error_bounds) as grid-shaped arrays, zero off the mask
    """
    opts = opts or QuadratureOptions()
    grid = vs.grid
    mask = np.asarray(mask, dtype=bool)
    avg = np.zeros(grid.cells)
    err = np.zeros(grid.cells)
    kind = vs.exterior_kind()
    if kind == "empty" or not mask.any():
        return avg, err
    pts, qw = _cell_points(grid, mask, opts.exterior_gauss)
    cells, per_cell = pts.shape[0], pts.shape[1]
    dirs, weights, parity = angular_rule(grid.n, opts.angular_nodes)
    s = k.s
    if kind == "full":
        dist = exit_distance(pts.reshape(-1, grid.n), dirs, grid.lo_array, grid.hi_array)
        radial = np.maximum(dist, 1e-300) ** (-s) / s
        trunc = np.zeros(dist.shape[0])
    else:
        profile = _exterior_profile(vs.exterior, grid, np.ascontiguousarray(mask).tobytes(), opts)
        radial = profile.integral(s)
        trunc = profile.truncation(s) @ weights
    phi, ang = rule_with_error(radial, weights, parity)
    phi = (phi * k.normalization).reshape(cells, per_cell)
    ang = ((ang + trunc) * k.normalization).reshape(cells, per_cell)
    cell_avg = phi[:, :-1] @ qw
    avg[mask] = cell_avg
    err[mask] = np.abs(cell_avg - phi[:, -1]) + ang[:, :-1] @ qw
    return avg, err


# ==================== INTERACTION ====================

def _as_voxels(a, b, grid: Optional[GridSpec], cells: int) -> Tuple[VoxelSet, VoxelSet]:
    grids = [v.grid for v in (a, b) if isinstance(v, VoxelSet)]
    if grid is None and grids:
        grid = grids[0]
    if any(g != grid for g in grids):
        raise ValidationError("grid", "voxel sets live on different grids")
    if grid is None:
        boxes = [shape_extent(v) for v in (a, b)]
        boxes = [bx for bx in boxes if bx is not None]
        if not boxes:
            raise DivergentIntegralError("both sets are unbounded")
        lo = np.min([bx[0] for bx in boxes], axis=0)
        hi = np.max([bx[1] for bx in boxes], axis=0)
        if np.any(hi <= lo):
            hi = np.where(hi <= lo, lo + 1.0, hi)
        grid = grid_around(lo, hi, cells)
    out = []
    for v in (a, b):
        if isinstance(v, VoxelSet):
            out.append(v)
        elif isinstance(v, ShapeExpr):
            if v.dim != grid.n:
                raise DimensionMismatchError("shape", "shape and grid dimension differ")
            out.append(voxelize(v, grid))
        else:
            raise ValidationError("set", f"expected a shape or voxel set, got {type(v).__name__}")
    return out[0], out[1]


def _order_key(vs: VoxelSet) -> Tuple[bytes, str]:
    return vs.fingerprint(), repr(vs.exterior)


def box_interaction(a: np.ndarray, b: np.ndarray, grid: GridSpec, k: KernelParams,
                    opts: QuadratureOptions) -> InteractionEstimate:
    """sum over distinct cell pairs of a_i b_j W(j - i)."""
    if not a.any() or not b.any():
        return ZERO
    weights, errors = lattice_table(grid, k, opts)
    corr = np.maximum(signal.correlate(b, a, mode="full"), 0.0)
    w_full = full_offset_table(weights)
    e_full = full_offset_table(errors)
    value = math.fsum((w_full * corr).ravel())
    error = math.fsum((e_full * corr).ravel())
    return InteractionEstimate(value, error)


def interaction(a: Union[VoxelSet, ShapeExpr], b: Union[VoxelSet, ShapeExpr], k: KernelParams,
                opts: Optional[QuadratureOptions] = None, grid: Optional[GridSpec] = None,
                cells: int = 64) -> InteractionEstimate:
    """
    I_s(A, B) for disjoint sets given as voxel sets or shapes.

    Inside the grid box cells interact through lattice weights; outside it
    the exterior of the unbounded set acts on the cells of the other set
    through its potential. At most one of the two may reach outside the box.
    """
    opts = opts or QuadratureOptions()
    va, vb = _as_voxels(a, b, grid, cells)
    if va.grid.n != k.n:
        raise DimensionMismatchError("kernel.n", f"kernel n={k.n} but sets have n={va.grid.n}")
    if np.any(va.occupancy + vb.occupancy > 1.0 + 1e-9):
        raise ValidationError("sets", "A and B overlap on a set of positive measure")
    kind_a, kind_b = va.exterior_kind(), vb.exterior_kind()
    if kind_a != "empty" and kind_b != "empty":
        raise DivergentIntegralError("both sets reach outside the grid box")
    if (not va.occupancy.any() and kind_a == "empty") or (not vb.occupancy.any() and kind_b == "empty"):
        return ZERO
    if _order_key(vb) < _order_key(va):
        va, vb = vb, va
    grid = va.grid
    total = box_interaction(va.occupancy, vb.occupancy, grid, k, opts)
    for inner, outer in ((va, vb), (vb, va)):
        mask = inner.occupancy > 0
        avg, err = exterior_cell_potential(outer, mask, k, opts)
        if avg.any():
            vol = grid.cell_volume
            total = total + InteractionEstimate(math.fsum((inner.occupancy * avg).ravel()) * vol,
                                                math.fsum((inner.occupancy * err).ravel()) * vol)
    logger.debug(f"[QUADRATURE] I_s = {total.value:.10g} +/- {total.error_bound:.3g} (s={k.s:g})")
    return total


# ==================== TAILS ====================

@lru_cache(maxsize=32)
def _tail_profile(shape: ShapeExpr, radius: float, opts: QuadratureOptions):
    n = shape.dim
    r_far = opts.far_radius(max(radius, 1.0))
    if n == 2:
        coarse = (np.arange(opts.angular_nodes) + 0.5) * 2.0 * math.pi / opts.angular_nodes
        unit = lambda phi: np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        asym = shape.asymptotic_contains(unit(coarse))
        nxt = np.roll(asym, -1)
        flips = np.nonzero(asym != nxt)[0]
        lo = coarse[flips]
        hi = lo + 2.0 * math.pi / opts.angular_nodes
        state = asym[flips]
        for _ in range(opts.bisection_steps):
            mid = 0.5 * (lo + hi)
            same = shape.asymptotic_contains(unit(mid)) == state
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        breaks = np.sort(np.mod(0.5 * (lo + hi), 2.0 * math.pi))
        if breaks.size == 0:
            breaks = np.array([0.0])
        arcs = np.stack([breaks, np.roll(breaks, -1)], axis=1)
        arcs[-1, 1] += 2.0 * math.pi
        rules = []
        for q in (16, 8):
            x, w = _gauss(q)
            mid = 0.5 * (arcs[:, :1] + arcs[:, 1:])
            half = 0.5 * (arcs[:, 1:] - arcs[:, :1])
            rules.append(((mid + half * x).ravel(), (half * w).ravel()))
        phis = np.concatenate([rules[0][0], rules[1][0]])
        dirs = unit(phis)
        weights = (rules[0][1], rules[1][1])
    else:
        dirs, w, parity = angular_rule(n, opts.angular_nodes)
        weights = (w, parity)
    starts = np.full((1, dirs.shape[0]), float(radius))
    profile = trace_rays(shape, np.zeros((1, n)), dirs, starts, r_far, opts)
    return profile, weights


def tail_integral_estimate(shape: ShapeExpr, radius: float, k: KernelParams,
                           opts: Optional[QuadratureOptions] = None) -> InteractionEstimate:
    """
    int_{E outside B_R(0)} |x|^-(n+s) dx, without the s(1-s) factor.

    Exact for cones with apex at the origin; otherwise polar quadrature
    with asymptotic membership beyond the far radius.
    """
    opts = opts or QuadratureOptions()
    if not radius > 0:
        raise ValidationError("R", "radius must be positive")
    if shape.dim != k.n:
        raise DimensionMismatchError("shape", "shape and kernel dimension differ")
    s = k.s
    aperture = cone_aperture(shape)
    if aperture is not None:
        return InteractionEstimate(aperture * k.sphere_area * radius ** (-s) / s, 0.0)
    profile, weights = _tail_profile(shape, float(radius), opts)
    radial = profile.integral(s)[0]
    trunc = profile.truncation(s)[0]
    if k.n == 2:
        w16, w8 = weights
        m = w16.size
        fine, coarse = radial[:m] @ w16, radial[m:] @ w8
        error = abs(fine - coarse) + trunc[:m] @ w16
        return InteractionEstimate(float(fine), float(error))
    w, parity = weights
    value, ang = rule_with_error(radial, w, parity)
    return InteractionEstimate(float(value), float(ang + trunc @ w))


def tail_integral(shape: ShapeExpr, radius: float, k: KernelParams,
                  opts: Optional[QuadratureOptions] = None) -> float:
    return tail_integral_estimate(shape, radius, k, opts).value
