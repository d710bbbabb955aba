"""
Geometry Tests
Shapes, grids, voxelization, boundary meshes and classical perimeters.
Run directly (python test_geometry.py) or through pytest.
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from src.errors import DimensionMismatchError, UnsupportedShapeError, ValidationError
from src.geometry_module import (
    Ball,
    Box,
    Complement,
    Cone,
    EmptySet,
    FullSpace,
    GridSpec,
    HalfSpace,
    Linear,
    RadialGraph,
    Scale,
    Translate,
    Union,
    VoxelShape,
    boundary_mesh,
    classical_perimeter,
    cone_aperture,
    contains,
    grid_around,
    load_voxels,
    rotation_matrix,
    save_voxels,
    shape_from_json,
    volume,
    voxelize,
)


def test_membership_and_operators():
    disk = Ball((0.0, 0.0), 1.0)
    upper = HalfSpace((0.0, 1.0))
    assert contains(disk, [0.0, 0.0])
    assert not contains(disk, [1.5, 0.0])
    assert contains(disk & upper, [0.0, 0.5])
    assert not contains(disk & upper, [0.0, -0.5])
    assert contains(disk | upper, [0.0, 5.0])
    assert contains(~disk, [2.0, 0.0])
    # half-spaces are open
    assert not contains(upper, [3.0, 0.0])


def test_batched_membership():
    disk = Ball((0.0, 0.0), 1.0)
    pts = np.array([[0.0, 0.0], [0.5, 0.5], [2.0, 0.0]])
    assert disk.contains(pts).tolist() == [True, True, False]
    grid_pts = np.zeros((3, 4, 2))
    assert disk.contains(grid_pts).shape == (3, 4)


def test_dimension_mismatch():
    disk = Ball((0.0, 0.0), 1.0)
    try:
        contains(disk, [0.0, 0.0, 0.0])
        assert False, "expected DimensionMismatchError"
    except DimensionMismatchError as e:
        assert "point" in str(e)
    try:
        Union(disk, Ball((0.0,), 1.0))
        assert False, "expected DimensionMismatchError"
    except DimensionMismatchError:
        pass


def test_invalid_shapes_name_their_field():
    try:
        Ball((0.0, 0.0), -1.0)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "shape.radius"
    try:
        shape_from_json({"type": "ball", "center": [0.0, 0.0]}, "omega")
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "omega.radius"
    try:
        shape_from_json({"type": "torus"})
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "shape.type"


def test_shape_json():
    doc = {"type": "union", "args": [
        {"type": "ball", "center": [-1.5, 0.0], "radius": 1.0},
        {"type": "translate", "vector": [1.5, 0.0],
         "arg": {"type": "box", "lo": [-0.5, -0.5], "hi": [0.5, 0.5]}},
    ]}
    shape = shape_from_json(doc)
    assert contains(shape, [-1.5, 0.0])
    assert contains(shape, [1.5, 0.2])
    assert not contains(shape, [0.0, 0.0])
    again = shape_from_json(shape.to_json())
    pts = np.random.default_rng(0).uniform(-3, 3, size=(200, 2))
    assert np.array_equal(shape.contains(pts), again.contains(pts))


def test_linear_and_radial_graph():
    ellipse = Linear(Ball((0.0, 0.0), 1.0), [[2.0, 0.0], [0.0, 1.0]])
    assert contains(ellipse, [1.9, 0.0])
    assert not contains(ellipse, [0.0, 1.1])
    lo, hi = ellipse.bounds()
    assert np.allclose(lo, [-2.0, -1.0]) and np.allclose(hi, [2.0, 1.0])
    flower = RadialGraph((0.0, 0.0), 1.0, ((3, 0.2, 0.0),))
    assert contains(flower, [1.15, 0.0])
    assert not contains(flower, [-0.85, 0.0])
    assert contains(flower, [-0.75, 0.0])


def test_bounds_and_cobounds():
    assert HalfSpace((1.0, 0.0)).bounds() is None
    lo, hi = Complement(Ball((0.0, 0.0), 2.0)).cobounds()
    assert np.allclose(lo, [-2.0, -2.0]) and np.allclose(hi, [2.0, 2.0])
    assert FullSpace(2).bounds() is None
    assert EmptySet(2).bounds() is not None


def test_cone_aperture():
    assert cone_aperture(Cone((1.0, 1.0), math.pi / 4)) == 0.25
    assert cone_aperture(HalfSpace((0.0, 1.0))) == 0.5
    assert cone_aperture(Complement(Cone((1.0, 0.0), math.pi / 4))) == 0.75
    assert cone_aperture(FullSpace(3)) == 1.0
    assert cone_aperture(EmptySet(2)) == 0.0
    assert cone_aperture(Linear(HalfSpace((0.0, 1.0)), rotation_matrix(0.3))) == 0.5
    # a translated cone is not a cone with apex at the origin
    assert cone_aperture(Translate(Cone((1.0, 0.0), 0.5), (1.0, 0.0))) is None
    assert cone_aperture(HalfSpace((0.0, 1.0), 0.5)) is None


def test_grid_around_aligns_with_box():
    grid = grid_around([0.0, 0.0], [2.0, 1.0], cells=16)
    for axis, (lo, hi) in enumerate(((0.0, 2.0), (0.0, 1.0))):
        steps_lo = (lo - grid.lo[axis]) / grid.h[axis]
        steps_hi = (hi - grid.lo[axis]) / grid.h[axis]
        assert abs(steps_lo - round(steps_lo)) < 1e-9
        assert abs(steps_hi - round(steps_hi)) < 1e-9
    assert np.allclose(grid.h[0], grid.h[1])


def test_grid_validation():
    try:
        GridSpec((0.0,), (1.0,), (1,))
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "grid.cells"


def test_aligned_box_voxelizes_exactly():
    box = Box((0.0, 0.0), (1.0, 1.0))
    grid = grid_around(*box.bounds(), cells=8)
    vs = voxelize(box, grid)
    assert set(np.unique(vs.occupancy)) <= {0.0, 1.0}
    assert abs(volume(vs) - 1.0) < 1e-12
    assert vs.exterior_kind() == "empty"
    assert vs.complement().exterior_kind() == "full"


def test_disk_volume():
    disk = Ball((0.0, 0.0), 1.0)
    vs = voxelize(disk, grid_around(*disk.bounds(), cells=64))
    assert abs(volume(vs) - math.pi) < 5e-3


def test_unbounded_volume_needs_region():
    disk = Ball((0.0, 0.0), 1.0)
    grid = grid_around(*disk.bounds(), cells=64)
    vs = voxelize(HalfSpace((0.0, 1.0)), grid)
    assert vs.exterior_kind() == "general"
    try:
        volume(vs)
        assert False, "expected ValidationError"
    except ValidationError as e:
        assert e.field == "region"
    assert abs(volume(vs, disk) - math.pi / 2) < 1e-2


def test_voxel_files():
    disk = Ball((0.0, 0.0), 1.0)
    vs = voxelize(disk, grid_around(*disk.bounds(), cells=16))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_voxels(Path(tmp) / "disk.json", vs)
        back = load_voxels(path)
    assert back.grid == vs.grid
    assert np.array_equal(back.occupancy, vs.occupancy)
    assert back.exterior == disk


def test_voxel_shape_membership():
    disk = Ball((0.0, 0.0), 1.0)
    vs = voxelize(disk, grid_around(*disk.bounds(), cells=32))
    shape = VoxelShape(vs)
    assert contains(shape, [0.0, 0.0])
    assert not contains(shape, [0.0, 1.2])
    assert not contains(shape, [5.0, 5.0])


def test_circle_mesh():
    mesh = boundary_mesh(Ball((1.0, 2.0), 2.0), 360)
    assert len(mesh) == 360
    assert abs(mesh.total_weight - 4.0 * math.pi) < 1e-10
    outward = np.einsum("ij,ij->i", mesh.points - [1.0, 2.0], mesh.normals)
    assert np.all(outward > 0)


def test_mesh_transforms():
    mesh = boundary_mesh(Ball((0.0, 0.0), 1.0), 200)
    rotated = mesh.transformed(rotation_matrix(0.7), shift=(3.0, -1.0))
    assert abs(rotated.total_weight - mesh.total_weight) < 1e-10
    scaled = boundary_mesh(Scale(Ball((0.0, 0.0), 1.0), 2.0), 200)
    assert abs(scaled.total_weight - 2.0 * mesh.total_weight) < 1e-10
    square = boundary_mesh(Box((0.0, 0.0), (1.0, 2.0)), 120)
    assert abs(square.total_weight - 6.0) < 1e-12


def test_overlapping_union_has_no_mesh():
    overlap = Union(Ball((0.0, 0.0), 1.0), Ball((0.5, 0.0), 1.0))
    try:
        boundary_mesh(overlap, 64)
        assert False, "expected UnsupportedShapeError"
    except UnsupportedShapeError:
        pass
    apart = Union(Ball((-1.5, 0.0), 1.0), Ball((1.5, 0.0), 1.0))
    mesh = boundary_mesh(apart, 64)
    assert set(mesh.component.tolist()) == {0, 1}


def test_classical_perimeter():
    assert classical_perimeter(Box((0.0, 0.0), (2.0, 2.0))) == 8.0
    assert abs(classical_perimeter(Ball((0.0, 0.0), 1.0)) - 2.0 * math.pi) < 1e-12
    disk = Ball((0.0, 0.0), 1.0)
    assert abs(classical_perimeter(HalfSpace((0.0, 1.0)), disk) - 2.0) < 1e-12
    # voxel fallback for a rotated square
    diamond = Linear(Box((-0.5, -0.5), (0.5, 0.5)), rotation_matrix(math.pi / 4))
    assert abs(classical_perimeter(diamond) - 4.0) < 0.05


def test_half_space_perimeter_in_box():
    square = Box((-0.5, -0.5), (0.5, 0.5))
    assert abs(classical_perimeter(HalfSpace((0.0, 1.0)), square) - 1.0) < 1e-12
    assert abs(classical_perimeter(Complement(HalfSpace((0.0, 1.0))), square) - 1.0) < 1e-12
    assert abs(classical_perimeter(HalfSpace((1.0, 1.0)), square) - math.sqrt(2.0)) < 1e-12
    assert abs(classical_perimeter(HalfSpace((0.0, 1.0), 0.25), square) - 1.0) < 1e-12
    assert classical_perimeter(HalfSpace((0.0, 1.0), 0.75), square) == 0.0
    cube = Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    assert abs(classical_perimeter(HalfSpace((0.0, 0.0, 1.0)), cube) - 1.0) < 1e-12
    assert abs(classical_perimeter(HalfSpace((1.0, 1.0, 0.0)), cube) - math.sqrt(2.0)) < 1e-12
    # regular hexagon through the cube center
    hexagon = 3.0 * math.sqrt(3.0) / 2.0 * (math.sqrt(2.0) / 2.0) ** 2
    assert abs(classical_perimeter(HalfSpace((1.0, 1.0, 1.0)), cube) - hexagon) < 1e-10


def test_perimeter_is_rigid_and_scales():
    square = Box((-0.5, -0.5), (0.5, 0.5))
    moved = Translate(square, (3.0, -2.0))
    assert classical_perimeter(moved) == classical_perimeter(square)
    assert abs(classical_perimeter(Scale(square, 2.5)) - 2.5 * classical_perimeter(square)) < 1e-12
    disk = Ball((0.0, 0.0), 1.0)
    cut = classical_perimeter(Translate(HalfSpace((0.0, 1.0)), (0.4, 0.3)), Translate(disk, (0.4, 0.3)))
    assert abs(cut - 2.0) < 0.03
    rotated = classical_perimeter(Linear(square, rotation_matrix(0.3)))
    assert abs(rotated - 4.0) < 0.05
    assert abs(classical_perimeter(Linear(square, rotation_matrix(1.1))) - rotated) < 0.05


def main():
    """Run all tests"""
    print("\n" + "="*60)
    print("Geometry Module Tests")
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
