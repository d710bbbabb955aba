"""
Plateau Solver Tests
Graph assembly, exact minimization, diagnostics and the fixed-volume search.
"""

import json
import math
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from src.errors import ValidationError
from src.geometry_module import Box, Cone, EmptySet, FullSpace, HalfSpace, Translate, VoxelSet
from src.functionals_module import fraenkel_asymmetry
from src.plateau_module import (
    PlateauOptions,
    PlateauProblem,
    assemble_graph,
    discrete_energy,
    exhaustive_minimum,
    save_solution,
    solve_fixed_volume,
    solve_plateau,
)
from src.quadrature_module import KernelParams, pair_weight


SQUARE = Box((-0.5, -0.5), (0.5, 0.5))
LOWER_HALF = HalfSpace((0.0, -1.0))
STICKY_SECTOR = Translate(Cone((0.0, -1.0), math.pi / 8), (0.0, 0.2))


def small_problem(cells=3, s=0.5, datum=LOWER_HALF):
    return PlateauProblem.around(SQUARE, datum, KernelParams(2, s), cells=cells, margin=2)


def test_two_cell_graph():
    p = PlateauProblem.around(Box((0.0,), (1.0,)), HalfSpace((-1.0,), -0.5), KernelParams(1, 0.5),
                              cells=2, margin=2)
    graph = assemble_graph(p)
    assert graph.edge_count == 1
    h = 0.5
    assert abs(graph.weights[0] - pair_weight(((0.0,), (h,)), ((h,), (2 * h,)), p.kernel)) < 1e-9
    free = np.argwhere(p.free)[:, 0]
    for a in (False, True):
        for b in (False, True):
            labels = np.zeros(p.grid.cells, dtype=bool)
            labels[free] = (a, b)
            cut, energy = graph.cut_value(labels), discrete_energy(p, labels)
            assert abs(cut - energy) <= 1e-10 * max(1.0, energy)


def test_cut_matches_energy_on_random_labels():
    p = small_problem(cells=6)
    graph = assemble_graph(p)
    rng = np.random.default_rng(7)
    for _ in range(5):
        labels = np.zeros(p.grid.cells, dtype=bool)
        labels[p.free] = rng.random(int(p.free.sum())) < 0.5
        cut, energy = graph.cut_value(labels), discrete_energy(p, labels)
        assert abs(cut - energy) <= 1e-10 * max(1.0, energy)


def test_min_cut_matches_enumeration():
    for s in (0.2, 0.5, 0.8):
        p = small_problem(cells=3, s=s)
        solution = solve_plateau(p, PlateauOptions(debug_checks=True))
        _, best = exhaustive_minimum(p)
        assert abs(solution.energy - best) <= 1e-9 * max(1.0, best)


def test_enumeration_limit():
    try:
        exhaustive_minimum(small_problem(cells=6))
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "omega"


def test_trivial_data():
    full = solve_plateau(small_problem(cells=6, datum=FullSpace(2)))
    assert full.labels[full.problem.free].all()
    assert full.energy == 0.0
    empty = solve_plateau(small_problem(cells=6, datum=EmptySet(2)))
    assert not empty.labels[empty.problem.free].any()
    assert empty.energy == 0.0


def test_half_plane_datum_stays_flat():
    p = PlateauProblem.around(SQUARE, LOWER_HALF, KernelParams(2, 0.5), cells=16, margin=4)
    solution = solve_plateau(p)
    assert solution.flatness is not None and solution.flatness <= 1
    assert solution.energy >= 0
    gap = solution.boundary_trace_gap
    assert np.all(np.isnan(gap[~p.free]))
    report = solution.to_json()
    assert report["energy"]["error_bound"] >= solution.dropped_bound


def test_problem_validation():
    try:
        PlateauProblem.around(SQUARE, HalfSpace((1.0,)), KernelParams(2, 0.5), cells=4)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "plateau"
    try:
        PlateauProblem.around(SQUARE, LOWER_HALF, KernelParams(2, 0.5), cells=4, pair_cutoff=0.0)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "plateau.pair_cutoff"


def test_fixed_volume_target_range():
    p = small_problem(cells=4, datum=EmptySet(2))
    try:
        solve_fixed_volume(p, 2.0)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "target_volume"


def test_fixed_volume_gives_quasi_ball():
    p = PlateauProblem.around(SQUARE, EmptySet(2), KernelParams(2, 0.5), cells=32, margin=6,
                              pair_cutoff=0.1875)
    target = math.pi * 0.3 ** 2
    solution = solve_fixed_volume(p, target)
    tol = 0.02 * target + p.grid.cell_volume
    assert abs(solution.volume - target) <= tol
    assert solution.details["phase"] in ("bisection", "proximal")
    assert solution.mu is not None
    asym, _ = fraenkel_asymmetry(VoxelSet(p.grid, solution.labels.astype(float)))
    assert asym < 0.1


def test_min_cut_beats_random_labels():
    p = small_problem(cells=8, s=0.4)
    graph = assemble_graph(p)
    solution = solve_plateau(p)
    rng = np.random.default_rng(11)
    for _ in range(100):
        labels = np.zeros(p.grid.cells, dtype=bool)
        labels[p.free] = rng.random(int(p.free.sum())) < rng.random()
        assert solution.energy <= graph.cut_value(labels) + 1e-10 * max(1.0, solution.energy)


def test_ties_resolve_to_label_one():
    graph = assemble_graph(small_problem(cells=4))
    flat = replace(graph, unary_one=np.zeros_like(graph.unary_one), unary_zero=np.zeros_like(graph.unary_zero),
                   weights=tuple(0.0 for _ in graph.weights))
    labels, energy = flat.minimize()
    assert energy == 0.0
    assert labels[graph.problem.free].all()


def test_symmetric_datum_gives_symmetric_minimizer():
    p = PlateauProblem.around(SQUARE, STICKY_SECTOR, KernelParams(2, 0.5), cells=16, margin=4)
    labels = solve_plateau(p).labels
    assert np.array_equal(labels, labels[::-1, :])


def test_fixed_volume_mu_path_is_monotone():
    p = PlateauProblem.around(SQUARE, EmptySet(2), KernelParams(2, 0.5), cells=16, margin=4,
                              pair_cutoff=0.25)
    solution = solve_fixed_volume(p, math.pi * 0.25 ** 2)
    path = solution.details["mu_path"]
    assert len(path) >= 3
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(path, path[1:]))
    report = solution.to_json()
    assert report["mu"]["tolerance"] == 1e-6
    assert report["target_volume"]["error_bound"] == 0.0


def test_longer_pair_cutoff_stays_within_dropped_bound():
    k = KernelParams(2, 0.5)
    short = solve_plateau(PlateauProblem.around(SQUARE, LOWER_HALF, k, cells=12, margin=4, pair_cutoff=0.2))
    long = solve_plateau(PlateauProblem.around(SQUARE, LOWER_HALF, k, cells=12, margin=4, pair_cutoff=0.4))
    slack = 1e-9 * max(1.0, long.energy)
    assert short.dropped_bound > long.dropped_bound >= 0
    assert short.energy - slack <= long.energy <= short.energy + short.dropped_bound + slack


def test_half_plane_datum_flat_on_fine_grid():
    p = PlateauProblem.around(SQUARE, LOWER_HALF, KernelParams(2, 0.5), cells=48, margin=8, pair_cutoff=0.25)
    solution = solve_plateau(p)
    assert solution.flatness is not None and solution.flatness <= 1


def test_small_s_detaches_from_narrow_sector():
    p = PlateauProblem.around(SQUARE, STICKY_SECTOR, KernelParams(2, 0.1), cells=48, margin=8,
                              pair_cutoff=0.35)
    solution = solve_plateau(p)
    assert solution.max_trace_gap > 0.5
    report = solution.to_json()
    assert report["boundary_trace_gap"]["cells_with_gap"] > 0
    assert report["dropped_pair_bound"] == {"value": solution.dropped_bound, "error_bound": 0.0}


def test_save_solution():
    solution = solve_plateau(small_problem(cells=4))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_solution(Path(tmp) / "run.json", solution)
        report = json.loads(path.read_text())
        assert (Path(tmp) / "run_labels.json").exists()
    assert set(report) == {"problem", "solution"}
    assert report["problem"]["free_cells"] == 16
    assert report["solution"]["volume"]["value"] == solution.volume


def main():
    """Run all tests"""
    print("\n" + "="*60)
    print("Plateau Solver Tests")
    print("="*60)

    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    failed = 0
    for name, func in tests:
        try:
            func()
            print(f"✓ {name}")
        except Exception as e:
            failed += 1
            print(f"✗ {name}: {type(e).__name__}: {e}")

    print(f"\nTotal: {len(tests) - failed}/{len(tests)} tests passed")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
