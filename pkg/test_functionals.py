"""
Functionals Tests
Perimeters, mass at infinity, limits, curvature, isoperimetry and second variation.
"""

import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from src.errors import DivergentIntegralError, ValidationError
from src.geometry_module import (
    Ball,
    Box,
    Complement,
    Cone,
    HalfSpace,
    Intersection,
    Linear,
    RadialGraph,
    Scale,
    Translate,
    Union as ShapeUnion,
    boundary_mesh,
    grid_around,
    rotation_matrix,
    voxelize,
)
from src.functionals_module import (
    curvature_estimate,
    curvature_profile,
    curvature_s_sweep,
    fraenkel_asymmetry,
    isoperimetric_report,
    per_s_global,
    per_s_local,
    s0_check,
    s0_limit_prediction,
    s1_check,
    second_variation_form,
    zeta_cone_exact,
    zeta_estimate,
)
from src.quadrature_module import KernelParams


QUARTER_PLANE = Intersection(HalfSpace((1.0, 0.0)), HalfSpace((0.0, 1.0)))


def test_interval_perimeter_is_two():
    unit = Box((0.0,), (1.0,))
    for s in (0.2, 0.5, 0.8):
        k = KernelParams(1, s)
        assert abs(per_s_global(unit, k).value - 2.0) < 1e-12
        assert abs(per_s_global(unit, k, method="grid", cells=64).value - 2.0) < 2e-2


def test_unbounded_perimeter_diverges():
    try:
        per_s_global(HalfSpace((0.0, 1.0)), KernelParams(2, 0.5))
        assert False, "expected DivergentIntegralError"
    except DivergentIntegralError:
        pass


def test_disk_perimeter_methods_agree():
    k = KernelParams(2, 0.5)
    disk = Ball((0.0, 0.0), 1.0)
    boundary = per_s_global(disk, k, method="boundary")
    assert abs(boundary.value - 15.533) < 0.016
    grid = per_s_global(disk, k, method="grid", cells=32)
    assert abs(grid.value - boundary.value) < 0.02 * boundary.value


def test_local_perimeter_of_half_line():
    # 2 - 2^(1-s) inside plus two tails of 2^(1-s) - 1
    for s in (0.3, 0.5, 0.7):
        report = per_s_local(HalfSpace((1.0,)), Ball((0.0,), 1.0), KernelParams(1, s), cells=64)
        assert abs(report.terms[0] - (2.0 - 2.0 ** (1.0 - s))) < 1e-3
        assert abs(report.terms[1] - report.terms[2]) < 1e-9
        assert abs(report.total - 2.0 ** (1.0 - s)) < 1e-2
        assert report.error_bound >= 0


def test_zeta_of_cones():
    half = zeta_estimate(HalfSpace((0.0, 1.0)), [0.1, 0.05, 0.025])
    assert half.exact and half.extrapolated == 0.5
    quarter = zeta_estimate(QUARTER_PLANE, [0.1, 0.05, 0.025])
    assert not quarter.exact
    assert abs(quarter.extrapolated - 0.25) < 1e-6
    for _, value in quarter.samples:
        assert abs(value - 0.25) < 1e-6
    wedge = Cone((1.0, 1.0), math.pi / 4)
    inside = zeta_estimate(wedge, [0.1, 0.05, 0.025]).extrapolated
    outside = zeta_estimate(Complement(wedge), [0.1, 0.05, 0.025]).extrapolated
    assert inside == 0.25 and inside + outside == 1.0


def test_zeta_cone_exact():
    assert zeta_cone_exact(0.25) == 0.25
    try:
        zeta_cone_exact(1.5)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "aperture_fraction"


def test_zeta_needs_descending_list():
    for bad in ([0.05, 0.1, 0.2], [0.1, 0.05], [0.1, 0.1, 0.05]):
        try:
            zeta_estimate(HalfSpace((0.0, 1.0)), bad)
            assert False, "expected ValidationError"
        except ValidationError as e:
            assert e.field == "zeta.s_list"


def test_s0_prediction_quarter_disk():
    prediction = s0_limit_prediction(QUARTER_PLANE, Ball((0.0, 0.0), 1.0), 0.25)
    assert abs(prediction - 3.0 * math.pi / 8.0) < 1e-2


def test_s1_limit_half_line():
    check = s1_check(HalfSpace((1.0,)), Ball((0.0,), 1.0), [0.8, 0.9, 0.95])
    assert check.prediction == 1.0
    assert check.relative_gap < 0.02


def test_half_plane_curvature_vanishes():
    est = curvature_estimate(HalfSpace((0.0, 1.0)), (0.0, 0.0), KernelParams(2, 0.5))
    assert abs(est.value) < 1e-6
    assert np.allclose(est.normal, (0.0, -1.0), atol=1e-6)


def test_disk_curvature_matches_radial_derivative():
    # d/dr Per_s(B_r) at r = 1 equals |dB| H^s
    k = KernelParams(2, 0.5)
    per = per_s_global(Ball((0.0, 0.0), 1.0), k, method="boundary").value
    expected = (2.0 - k.s) * per / (2.0 * math.pi)
    est = curvature_estimate(Ball((0.0, 0.0), 1.0), (1.0, 0.0), k, pv_radius=1e-3, local_correction=True)
    assert abs(est.value - expected) < 1e-2 * expected


def test_curvature_profiles():
    k = KernelParams(2, 0.5)
    disk = Ball((0.0, 0.0), 1.0)
    round_profile = curvature_profile(disk, boundary_mesh(disk, 48), k)
    assert round_profile.rel_std < 1e-2
    flower = RadialGraph((0.0, 0.0), 1.0, ((3, 0.1, 0.0),))
    bumpy = curvature_profile(flower, boundary_mesh(flower, 48), k)
    assert bumpy.rel_std > 0.05


def test_curvature_sweep_toward_classical_limit():
    sweep = curvature_s_sweep(Ball((0.0, 0.0), 1.0), (1.0, 0.0), [0.8, 0.9, 0.95], pv_radius=1e-2)
    assert len(sweep.points) == 3
    assert abs(sweep.classical_limit - 2.0) < 2e-2
    assert sweep.fit_residual >= 0


def test_fraenkel_asymmetry():
    asym, center = fraenkel_asymmetry(Ball((0.3, -0.2), 1.0))
    assert asym < 0.02
    assert np.allclose(center, (0.3, -0.2), atol=0.02)
    square_asym, _ = fraenkel_asymmetry(Box((0.0, 0.0), (1.0, 1.0)))
    assert 0.1 < square_asym <= 2.0


def test_isoperimetric_report():
    k = KernelParams(2, 0.5)
    disk = isoperimetric_report(Ball((0.0, 0.0), 1.0), k)
    assert disk.method == "boundary"
    assert abs(disk.deficit) < 1e-9
    assert disk.stability_ratio is None
    square = isoperimetric_report(Box((0.0, 0.0), (1.0, 1.0)), KernelParams(2, 0.3),
                                  method="grid", cells=32)
    assert square.deficit > -square.deficit_error
    assert square.asymmetry > 0.1


def test_grid_padding_and_prediction_grid():
    k = KernelParams(2, 0.5)
    square = Box((0.0, 0.0), (1.0, 1.0))
    tight = per_s_global(square, k, method="grid", cells=16, padding=0.1).value
    loose = per_s_global(square, k, method="grid", cells=16, padding=0.75).value
    assert abs(tight - loose) < 1e-2 * loose
    disk = Ball((0.0, 0.0), 1.0)
    coarse = s0_limit_prediction(QUARTER_PLANE, disk, 0.25, cells=32, padding=0.5)
    assert abs(coarse - 3.0 * math.pi / 8.0) < 5e-2


def test_limit_check_reports_pairs():
    check = s1_check(HalfSpace((1.0,)), Ball((0.0,), 1.0), [0.8, 0.9, 0.95])
    report = check.to_json()
    assert report["prediction"] == {"value": check.prediction, "error_bound": check.prediction_error}
    assert report["relative_gap"]["value"] == check.relative_gap
    assert report["relative_gap"]["error_bound"] >= 0
    assert set(report["classical_perimeter"]) == {"value", "error_bound"}


def test_quarter_disk_small_s_limit():
    disk = Ball((0.0, 0.0), 1.0)
    check = s0_check(QUARTER_PLANE, disk, [0.1, 0.05, 0.025], cells=64)
    assert abs(check.prediction - 3.0 * math.pi / 8.0) <= check.prediction_error + 1e-2
    assert check.relative_gap < 0.03
    assert abs(check.details["zeta"]["value"] - 0.25) < 1e-6


def test_half_plane_in_disk_large_s_limit():
    check = s1_check(HalfSpace((0.0, 1.0)), Ball((0.0, 0.0), 1.0), [0.8, 0.9, 0.95])
    assert abs(check.prediction - 4.0) < 1e-9
    assert check.relative_gap < 0.05


def test_perimeter_is_rigid_and_homogeneous():
    ellipse = Linear(Ball((0.0, 0.0), 1.0), ((1.5, 0.0), (0.0, 0.8)))
    turned = Linear(Ball((0.0, 0.0), 1.0), rotation_matrix(0.6) @ np.array([[1.5, 0.0], [0.0, 0.8]]))
    for s in (0.3, 0.7):
        k = KernelParams(2, s)
        base = per_s_global(ellipse, k, method="boundary").value
        assert abs(per_s_global(Translate(ellipse, (2.0, -1.0)), k, method="boundary").value - base) < 1e-6 * base
        assert abs(per_s_global(turned, k, method="boundary").value - base) < 1e-6 * base
        scaled = per_s_global(Scale(ellipse, 2.0), k, method="boundary").value
        assert abs(scaled - 2.0 ** (2.0 - s) * base) < 1e-6 * scaled


def test_curvature_is_rigid_and_homogeneous():
    k = KernelParams(2, 0.5)
    base = curvature_estimate(Ball((0.0, 0.0), 1.0), (1.0, 0.0), k, pv_radius=1e-2, local_correction=True).value
    moved = curvature_estimate(Ball((0.5, 0.3), 1.0), (1.5, 0.3), k, pv_radius=1e-2, local_correction=True).value
    assert abs(moved - base) < 1e-3 * base
    turned = curvature_estimate(Ball((0.0, 0.0), 1.0), (math.cos(0.7), math.sin(0.7)), k,
                                pv_radius=1e-2, local_correction=True).value
    assert abs(turned - base) < 1e-3 * base
    big = curvature_estimate(Ball((0.0, 0.0), 2.0), (2.0, 0.0), k, pv_radius=2e-2, local_correction=True).value
    assert abs(big - 2.0 ** (-k.s) * base) < 5e-3 * base


def test_zeta_grows_with_nested_wedges():
    previous = -1.0
    for theta in (math.pi / 6, math.pi / 3, math.pi / 2, 2 * math.pi / 3, 5 * math.pi / 6):
        wedge = Intersection(HalfSpace((0.0, 1.0)), HalfSpace((math.sin(theta), -math.cos(theta))))
        zeta = zeta_estimate(wedge, [0.1, 0.05, 0.025])
        assert not zeta.exact
        assert abs(zeta.extrapolated - theta / (2.0 * math.pi)) < 1e-5
        assert zeta.extrapolated > previous
        previous = zeta.extrapolated


def test_coarse_meshes_have_no_false_corners():
    k = KernelParams(2, 0.5)
    disk = Ball((0.0, 0.0), 1.0)
    coarse = curvature_profile(disk, boundary_mesh(disk, 12), k)
    assert coarse.mean > 0
    assert coarse.rel_std < 1e-2
    flower = RadialGraph((0.0, 0.0), 1.0, ((3, 0.1, 0.0),))
    bumpy = curvature_profile(flower, boundary_mesh(flower, 24), k)
    assert np.all(np.isfinite(bumpy.values))
    assert bumpy.spread > 0


def test_disk_profile_is_flat_and_scales():
    k = KernelParams(2, 0.5)
    unit = curvature_profile(Ball((0.0, 0.0), 1.0), boundary_mesh(Ball((0.0, 0.0), 1.0), 180), k)
    assert unit.rel_std < 1e-2
    double = curvature_profile(Ball((0.0, 0.0), 2.0), boundary_mesh(Ball((0.0, 0.0), 2.0), 180), k)
    assert abs(double.mean - 2.0 ** (-k.s) * unit.mean) < 1e-2 * abs(unit.mean)
    report = unit.to_json()
    assert set(report["rel_std"]) == {"value", "error_bound"}
    assert report["pv_radius"]["tolerance"] == 0.0


def test_separated_disks_profile_varies():
    pair = ShapeUnion(Ball((-1.5, 0.0), 1.0), Ball((1.5, 0.0), 1.0))
    profile = curvature_profile(pair, boundary_mesh(pair, 96), KernelParams(2, 0.5))
    assert profile.spread > 0.05


def test_square_deficit_exceeds_disk():
    side = math.sqrt(math.pi)
    square = Box((-side / 2, -side / 2), (side / 2, side / 2))
    for s in (0.3, 0.7):
        k = KernelParams(2, s)
        disk = isoperimetric_report(Ball((0.3, -0.2), 1.0), k, method="grid", cells=64)
        boxed = isoperimetric_report(square, k, method="grid", cells=64)
        assert abs(disk.deficit) <= 2.0 * disk.deficit_error
        assert boxed.deficit > 0
        assert boxed.deficit > disk.deficit


def test_isoperimetric_report_on_voxels():
    vs = voxelize(Ball((0.0, 0.0), 1.0), grid_around((-1.0, -1.0), (1.0, 1.0), 48))
    report = isoperimetric_report(vs, KernelParams(2, 0.5))
    assert report.method == "grid"
    assert abs(report.volume - math.pi) < 1e-2
    assert abs(report.deficit) < 1e-2
    assert report.asymmetry < 0.05
    payload = report.to_json()
    for key in ("volume", "ratio", "ball_ratio", "deficit"):
        assert set(payload[key]) == {"value", "error_bound"}
    assert set(payload["asymmetry"]) == {"value", "tolerance"}


def test_second_variation_matches_finite_difference():
    # off the calibration radius: Q picks up R^-s
    k = KernelParams(2, 0.5)
    radius, amplitude = 2.0, 0.015
    form = second_variation_form(boundary_mesh(Ball((0.0, 0.0), radius), 256), k)
    phi = np.arctan2(form.mesh.points[:, 1], form.mesh.points[:, 0])
    q = form(np.cos(2.0 * phi))
    per = [per_s_global(RadialGraph((0.0, 0.0), radius, ((2, a, 0.0),)), k, method="boundary",
                        resolution=1440).value for a in (-amplitude, 0.0, amplitude)]
    second = (per[0] - 2.0 * per[1] + per[2]) / (radius * amplitude) ** 2
    assert abs(q - second) < 0.05 * abs(second)


def test_second_variation_on_disk():
    mesh = boundary_mesh(Ball((0.0, 0.0), 1.0), 256)
    form = second_variation_form(mesh, KernelParams(2, 0.5))
    assert form.jacobi_part(np.ones(len(mesh))) == 0.0
    shift = mesh.normals[:, 0].copy()
    assert abs(form(shift)) <= 1e-3 * form.norm_squared(shift)
    assert form.calibrated
    phi = np.arctan2(mesh.points[:, 1], mesh.points[:, 0])
    assert form(np.cos(2.0 * phi)) > 0


def test_second_variation_needs_plane_or_space():
    mesh = boundary_mesh(Box((0.0,), (1.0,)), 2)
    try:
        second_variation_form(mesh, KernelParams(1, 0.5))
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "kernel.n"


def main():
    """Run all tests"""
    print("\n" + "="*60)
    print("Functionals Module Tests")
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
