"""
Geometry Module
Analytic shape algebra, uniform grids, voxelized sets and boundary meshes
for subsets of R^n with n in {1, 2, 3}.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from skimage import measure

from .errors import (
    DimensionMismatchError,
    MeshError,
    UnsupportedShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

Bounds = Optional[Tuple[np.ndarray, np.ndarray]]

# Points evaluated per membership batch
_BATCH_POINTS = 1 << 20


def _as_tuple(values, name: str) -> Tuple[float, ...]:
    try:
        out = tuple(float(v) for v in np.asarray(values, dtype=float).ravel())
    except (TypeError, ValueError) as e:
        raise ValidationError(name, f"expected a list of numbers ({e})")
    if not 1 <= len(out) <= 3:
        raise DimensionMismatchError(name, f"dimension {len(out)} not in 1..3")
    return out


def _hull(a: Bounds, b: Bounds) -> Bounds:
    if a is None or b is None:
        return None
    return np.minimum(a[0], b[0]), np.maximum(a[1], b[1])


def _meet(a: Bounds, b: Bounds) -> Bounds:
    if a is None:
        return b
    if b is None:
        return a
    lo = np.maximum(a[0], b[0])
    hi = np.maximum(np.minimum(a[1], b[1]), lo)
    return lo, hi


def box_inside(inner: Bounds, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-12) -> bool:
    """True when the box `inner` lies in [lo, hi] (None means unbounded)."""
    if inner is None:
        return False
    scale = tol * max(1.0, float(np.max(np.abs(np.concatenate([lo, hi])))))
    return bool(np.all(inner[0] >= lo - scale) and np.all(inner[1] <= hi + scale))


# ==================== SHAPE ALGEBRA ====================

class ShapeExpr:
    """
    Base class of the set algebra.

    Subclasses implement `_inside` on an (N, n) array with strict
    inequalities, so primitive boundaries are excluded.
    """

    dim: int

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.dim:
            raise DimensionMismatchError(
                "point", f"point has dimension {pts.shape[-1]}, shape has {self.dim}")
        flat = pts.reshape(-1, self.dim)
        inside = self._inside(flat)
        if pts.ndim == 1:
            return bool(inside[0])
        return inside.reshape(pts.shape[:-1])

    def _inside(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> Bounds:
        """Bounding box of the set, None if unbounded."""
        return None

    def cobounds(self) -> Bounds:
        """Bounding box of the complement, None if unbounded."""
        return None

    def asymptotic_contains(self, directions) -> np.ndarray:
        """Membership of R*u as R grows without bound, per unit direction u."""
        raise NotImplementedError

    def to_json(self) -> Dict[str, Any]:
        raise NotImplementedError

    # Combinators read naturally in experiment code
    def __or__(self, other: "ShapeExpr") -> "ShapeExpr":
        return Union(self, other)

    def __and__(self, other: "ShapeExpr") -> "ShapeExpr":
        return Intersection(self, other)

    def __invert__(self) -> "ShapeExpr":
        return Complement(self)


def _check_dims(*shapes: ShapeExpr) -> int:
    dims = {s.dim for s in shapes}
    if len(dims) != 1:
        raise DimensionMismatchError("shape", f"mixed dimensions {sorted(dims)}")
    return dims.pop()


@dataclass(frozen=True)
class Ball(ShapeExpr):
    center: Tuple[float, ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_tuple(self.center, "shape.center"))
        if not self.radius > 0:
            raise ValidationError("shape.radius", "radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return len(self.center)

    def _inside(self, pts):
        d = pts - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) < self.radius ** 2

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def asymptotic_contains(self, directions):
        return np.zeros(np.asarray(directions).shape[0], dtype=bool)

    def to_json(self):
        return {"type": "ball", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class HalfSpace(ShapeExpr):
    """The open set {x : normal . x > offset}."""

    normal: Tuple[float, ...]
    offset: float = 0.0

    def __post_init__(self):
        nrm = np.asarray(_as_tuple(self.normal, "shape.normal"))
        length = np.linalg.norm(nrm)
        if length == 0:
            raise ValidationError("shape.normal", "normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(v) for v in nrm / length))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self) -> int:
        return len(self.normal)

    def _inside(self, pts):
        return pts @ np.asarray(self.normal) > self.offset

    def asymptotic_contains(self, directions):
        proj = np.asarray(directions) @ np.asarray(self.normal)
        return np.where(proj == 0.0, self.offset < 0.0, proj > 0.0)

    def to_json(self):
        return {"type": "halfspace", "normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True)
class Cone(ShapeExpr):
    """Cone with apex at the origin over a spherical cap (axis, half-angle)."""

    axis: Tuple[float, ...]
    half_angle: float

    def __post_init__(self):
        ax = np.asarray(_as_tuple(self.axis, "shape.axis"))
        length = np.linalg.norm(ax)
        if length == 0:
            raise ValidationError("shape.axis", "axis must be non-zero")
        if not 0.0 < self.half_angle <= math.pi:
            raise ValidationError("shape.half_angle", "half_angle must lie in (0, pi]")
        object.__setattr__(self, "axis", tuple(float(v) for v in ax / length))
        object.__setattr__(self, "half_angle", float(self.half_angle))

    @property
    def dim(self) -> int:
        return len(self.axis)

    def _inside(self, pts):
        norm = np.linalg.norm(pts, axis=1)
        if self.half_angle >= math.pi:
            return norm > 0.0
        return pts @ np.asarray(self.axis) > norm * math.cos(self.half_angle)

    def asymptotic_contains(self, directions):
        return self._inside(np.asarray(directions, dtype=float))

    def to_json(self):
        return {"type": "cone", "axis": list(self.axis), "half_angle": self.half_angle}


@dataclass(frozen=True)
class Box(ShapeExpr):
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        lo = _as_tuple(self.lo, "shape.lo")
        hi = _as_tuple(self.hi, "shape.hi")
        if len(lo) != len(hi):
            raise DimensionMismatchError("shape.hi", "lo and hi differ in length")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValidationError("shape.hi", "hi must exceed lo componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def _inside(self, pts):
        return np.all((pts > np.asarray(self.lo)) & (pts < np.asarray(self.hi)), axis=1)

    def bounds(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def asymptotic_contains(self, directions):
        return np.zeros(np.asarray(directions).shape[0], dtype=bool)

    def to_json(self):
        return {"type": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Union(ShapeExpr):
    left: ShapeExpr
    right: ShapeExpr

    def __post_init__(self):
        _check_dims(self.left, self.right)

    @property
    def dim(self) -> int:
        return self.left.dim

    def _inside(self, pts):
        return self.left._inside(pts) | self.right._inside(pts)

    def bounds(self):
        return _hull(self.left.bounds(), self.right.bounds())

    def cobounds(self):
        a, b = self.left.cobounds(), self.right.cobounds()
        if a is None and b is None:
            return None
        return _meet(a, b)

    def asymptotic_contains(self, directions):
        return self.left.asymptotic_contains(directions) | self.right.asymptotic_contains(directions)

    def to_json(self):
        return {"type": "union", "args": [self.left.to_json(), self.right.to_json()]}


@dataclass(frozen=True)
class Intersection(ShapeExpr):
    left: ShapeExpr
    right: ShapeExpr

    def __post_init__(self):
        _check_dims(self.left, self.right)

    @property
    def dim(self) -> int:
        return self.left.dim

    def _inside(self, pts):
        return self.left._inside(pts) & self.right._inside(pts)

    def bounds(self):
        a, b = self.left.bounds(), self.right.bounds()
        if a is None and b is None:
            return None
        return _meet(a, b)

    def cobounds(self):
        return _hull(self.left.cobounds(), self.right.cobounds())

    def asymptotic_contains(self, directions):
        return self.left.asymptotic_contains(directions) & self.right.asymptotic_contains(directions)

    def to_json(self):
        return {"type": "intersection", "args": [self.left.to_json(), self.right.to_json()]}


@dataclass(frozen=True)
class Complement(ShapeExpr):
    arg: ShapeExpr

    @property
    def dim(self) -> int:
        return self.arg.dim

    def _inside(self, pts):
        return ~self.arg._inside(pts)

    def bounds(self):
        return self.arg.cobounds()

    def cobounds(self):
        return self.arg.bounds()

    def asymptotic_contains(self, directions):
        return ~self.arg.asymptotic_contains(directions)

    def to_json(self):
        return {"type": "complement", "arg": self.arg.to_json()}


@dataclass(frozen=True)
class Translate(ShapeExpr):
    arg: ShapeExpr
    vector: Tuple[float, ...]

    def __post_init__(self):
        vec = _as_tuple(self.vector, "shape.vector")
        if len(vec) != self.arg.dim:
            raise DimensionMismatchError("shape.vector", "vector and shape differ in dimension")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.arg.dim

    def _inside(self, pts):
        return self.arg._inside(pts - np.asarray(self.vector))

    def bounds(self):
        b = self.arg.bounds()
        return None if b is None else (b[0] + self.vector, b[1] + self.vector)

    def cobounds(self):
        b = self.arg.cobounds()
        return None if b is None else (b[0] + self.vector, b[1] + self.vector)

    def asymptotic_contains(self, directions):
        return self.arg.asymptotic_contains(directions)

    def to_json(self):
        return {"type": "translate", "arg": self.arg.to_json(), "vector": list(self.vector)}


@dataclass(frozen=True)
class Scale(ShapeExpr):
    arg: ShapeExpr
    factor: float

    def __post_init__(self):
        if not self.factor > 0:
            raise ValidationError("shape.factor", "scale factor must be positive")
        object.__setattr__(self, "factor", float(self.factor))

    @property
    def dim(self) -> int:
        return self.arg.dim

    def _inside(self, pts):
        return self.arg._inside(pts / self.factor)

    def bounds(self):
        b = self.arg.bounds()
        return None if b is None else (b[0] * self.factor, b[1] * self.factor)

    def cobounds(self):
        b = self.arg.cobounds()
        return None if b is None else (b[0] * self.factor, b[1] * self.factor)

    def asymptotic_contains(self, directions):
        return self.arg.asymptotic_contains(directions)

    def to_json(self):
        return {"type": "scale", "arg": self.arg.to_json(), "factor": self.factor}


@dataclass(frozen=True)
class Linear(ShapeExpr):
    """Image of `arg` under an invertible matrix."""

    arg: ShapeExpr
    matrix: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        n = self.arg.dim
        if mat.shape != (n, n):
            raise DimensionMismatchError("shape.matrix", f"expected a {n}x{n} matrix")
        if abs(np.linalg.det(mat)) < 1e-14:
            raise ValidationError("shape.matrix", "matrix must be invertible")
        object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in mat))

    @property
    def dim(self) -> int:
        return self.arg.dim

    @cached_property
    def _mat(self) -> np.ndarray:
        return np.asarray(self.matrix)

    @cached_property
    def _inv(self) -> np.ndarray:
        return np.linalg.inv(self._mat)

    def _inside(self, pts):
        return self.arg._inside(pts @ self._inv.T)

    def _map_box(self, b: Bounds) -> Bounds:
        if b is None:
            return None
        corners = np.array(np.meshgrid(*zip(b[0], b[1]), indexing="ij")).reshape(self.dim, -1).T
        mapped = corners @ self._mat.T
        return mapped.min(axis=0), mapped.max(axis=0)

    def bounds(self):
        return self._map_box(self.arg.bounds())

    def cobounds(self):
        return self._map_box(self.arg.cobounds())

    def asymptotic_contains(self, directions):
        pulled = np.asarray(directions, dtype=float) @ self._inv.T
        pulled /= np.linalg.norm(pulled, axis=1, keepdims=True)
        return self.arg.asymptotic_contains(pulled)

    def to_json(self):
        return {"type": "linear", "arg": self.arg.to_json(), "matrix": [list(r) for r in self.matrix]}


@dataclass(frozen=True)
class RadialGraph(ShapeExpr):
    """
    Star-shaped planar set r < radius * (1 + sum a_k cos(k (phi - phase_k))).

    `modes` holds (k, a_k, phase_k) triples.
    """

    center: Tuple[float, ...]
    radius: float
    modes: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        center = _as_tuple(self.center, "shape.center")
        if len(center) != 2:
            raise DimensionMismatchError("shape.center", "radial graphs are planar")
        modes = tuple((int(m[0]), float(m[1]), float(m[2]) if len(m) > 2 else 0.0)
                      for m in self.modes)
        if not self.radius > 0 or sum(abs(a) for _, a, _ in modes) >= 1.0:
            raise ValidationError("shape.modes", "radius function must stay positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "modes", modes)

    @property
    def dim(self) -> int:
        return 2

    def radius_at(self, phi: np.ndarray) -> np.ndarray:
        r = np.ones_like(phi, dtype=float)
        for k, a, phase in self.modes:
            r = r + a * np.cos(k * (phi - phase))
        return self.radius * r

    def radius_derivative(self, phi: np.ndarray) -> np.ndarray:
        dr = np.zeros_like(phi, dtype=float)
        for k, a, phase in self.modes:
            dr = dr - a * k * np.sin(k * (phi - phase))
        return self.radius * dr

    def _inside(self, pts):
        d = pts - np.asarray(self.center)
        phi = np.arctan2(d[:, 1], d[:, 0])
        return np.hypot(d[:, 0], d[:, 1]) < self.radius_at(phi)

    def bounds(self):
        c = np.asarray(self.center)
        reach = self.radius * (1.0 + sum(abs(a) for _, a, _ in self.modes))
        return c - reach, c + reach

    def asymptotic_contains(self, directions):
        return np.zeros(np.asarray(directions).shape[0], dtype=bool)

    def to_json(self):
        return {"type": "radial_graph", "center": list(self.center), "radius": self.radius,
                "modes": [list(m) for m in self.modes]}


@dataclass(frozen=True)
class FullSpace(ShapeExpr):
    n: int

    @property
    def dim(self) -> int:
        return self.n

    def _inside(self, pts):
        return np.ones(pts.shape[0], dtype=bool)

    def cobounds(self):
        return np.zeros(self.n), np.zeros(self.n)

    def asymptotic_contains(self, directions):
        return np.ones(np.asarray(directions).shape[0], dtype=bool)

    def to_json(self):
        return {"type": "full", "dim": self.n}


@dataclass(frozen=True)
class EmptySet(ShapeExpr):
    n: int

    @property
    def dim(self) -> int:
        return self.n

    def _inside(self, pts):
        return np.zeros(pts.shape[0], dtype=bool)

    def bounds(self):
        return np.zeros(self.n), np.zeros(self.n)

    def asymptotic_contains(self, directions):
        return np.zeros(np.asarray(directions).shape[0], dtype=bool)

    def to_json(self):
        return {"type": "empty", "dim": self.n}


@dataclass(frozen=True, eq=False)
class VoxelShape(ShapeExpr):
    """A voxel set read back as a shape (bilinear occupancy above 1/2)."""

    voxels: "VoxelSet"

    @property
    def dim(self) -> int:
        return self.voxels.grid.n

    def _inside(self, pts):
        grid = self.voxels.grid
        lo, hi = grid.lo_array, grid.hi_array
        in_box = np.all((pts >= lo) & (pts <= hi), axis=1)
        out = np.zeros(pts.shape[0], dtype=bool)
        if np.any(in_box):
            idx = ((pts[in_box] - lo) / grid.h - 0.5).T
            occ = ndimage.map_coordinates(self.voxels.occupancy, idx, order=1, mode="nearest")
            out[in_box] = occ > 0.5
        if self.voxels.exterior is not None and not np.all(in_box):
            out[~in_box] = self.voxels.exterior._inside(pts[~in_box])
        return out

    def bounds(self):
        box = (self.voxels.grid.lo_array, self.voxels.grid.hi_array)
        if self.voxels.exterior is None:
            return box
        return _hull(box, self.voxels.exterior.bounds())

    def cobounds(self):
        if self.voxels.exterior is None:
            return None
        return _hull((self.voxels.grid.lo_array, self.voxels.grid.hi_array),
                     self.voxels.exterior.cobounds())

    def asymptotic_contains(self, directions):
        if self.voxels.exterior is None:
            return np.zeros(np.asarray(directions).shape[0], dtype=bool)
        return self.voxels.exterior.asymptotic_contains(directions)

    def to_json(self):
        raise UnsupportedShapeError("shape", "voxel shapes serialize through save_voxels")


def contains(shape: ShapeExpr, x) -> bool:
    """Exact membership of a single point."""
    point = np.asarray(x, dtype=float)
    if point.ndim != 1:
        raise DimensionMismatchError("point", "expected a single point")
    return shape.contains(point)


def shape_from_json(doc: Dict[str, Any], field: str = "shape") -> ShapeExpr:
    """Build a shape from its JSON expression tree."""
    if not isinstance(doc, dict) or "type" not in doc:
        raise ValidationError(field, "shape expression needs a 'type'")
    kind = doc["type"]

    def need(key):
        if key not in doc:
            raise ValidationError(f"{field}.{key}", "missing")
        return doc[key]

    if kind == "ball":
        return Ball(need("center"), float(need("radius")))
    if kind == "halfspace":
        return HalfSpace(need("normal"), float(doc.get("offset", 0.0)))
    if kind == "cone":
        return Cone(need("axis"), float(need("half_angle")))
    if kind == "box":
        return Box(need("lo"), need("hi"))
    if kind in ("union", "intersection"):
        args = [shape_from_json(a, f"{field}.args[{i}]") for i, a in enumerate(need("args"))]
        if not args:
            raise ValidationError(f"{field}.args", "needs at least one operand")
        combine = Union if kind == "union" else Intersection
        out = args[0]
        for nxt in args[1:]:
            out = combine(out, nxt)
        return out
    if kind == "complement":
        return Complement(shape_from_json(need("arg"), f"{field}.arg"))
    if kind == "translate":
        return Translate(shape_from_json(need("arg"), f"{field}.arg"), need("vector"))
    if kind == "scale":
        return Scale(shape_from_json(need("arg"), f"{field}.arg"), float(need("factor")))
    if kind == "linear":
        return Linear(shape_from_json(need("arg"), f"{field}.arg"), need("matrix"))
    if kind == "radial_graph":
        return RadialGraph(need("center"), float(need("radius")),
                           tuple(tuple(m) for m in doc.get("modes", [])))
    if kind == "full":
        return FullSpace(int(need("dim")))
    if kind == "empty":
        return EmptySet(int(need("dim")))
    raise ValidationError(f"{field}.type", f"unknown shape type '{kind}'")


def rotation_matrix(angle: float, n: int = 2, axis: int = 2) -> np.ndarray:
    """Rotation by `angle` in the plane orthogonal to coordinate `axis` (3D) or in 2D."""
    c, s = math.cos(angle), math.sin(angle)
    if n == 2:
        return np.array([[c, -s], [s, c]])
    rot = np.eye(3)
    i, j = [k for k in range(3) if k != axis]
    rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return rot


def cone_aperture_fraction(n: int, half_angle: float) -> float:
    """Fraction of the unit sphere covered by a cap of the given half-angle."""
    if n == 1:
        return 1.0 if half_angle >= math.pi else 0.5
    if n == 2:
        return half_angle / math.pi
    if n == 3:
        return (1.0 - math.cos(half_angle)) / 2.0
    raise DimensionMismatchError("kernel.n", f"unsupported dimension {n}")


def cone_aperture(shape: ShapeExpr) -> Optional[float]:
    """Exact aperture fraction when `shape` is a cone with apex at the origin."""
    if isinstance(shape, Cone):
        return cone_aperture_fraction(shape.dim, shape.half_angle)
    if isinstance(shape, HalfSpace):
        return 0.5 if shape.offset == 0.0 else None
    if isinstance(shape, FullSpace):
        return 1.0
    if isinstance(shape, EmptySet):
        return 0.0
    if isinstance(shape, Complement):
        inner = cone_aperture(shape.arg)
        return None if inner is None else 1.0 - inner
    if isinstance(shape, Scale):
        return cone_aperture(shape.arg)
    if isinstance(shape, Linear):
        mat = np.asarray(shape.matrix)
        if np.allclose(mat.T @ mat, np.eye(shape.dim), atol=1e-12):
            return cone_aperture(shape.arg)
    return None


def shape_extent(shape: ShapeExpr) -> Bounds:
    """Box enclosing whichever of the set or its complement is bounded."""
    b = shape.bounds()
    return b if b is not None else shape.cobounds()


# ==================== GRIDS AND VOXELS ====================

@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid over the box [lo, hi]."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    cells: Tuple[int, ...]

    def __post_init__(self):
        lo = _as_tuple(self.lo, "grid.lo")
        hi = _as_tuple(self.hi, "grid.hi")
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        if len(cells) == 1 and len(lo) > 1:
            cells = cells * len(lo)
        if not len(lo) == len(hi) == len(cells):
            raise DimensionMismatchError("grid", "lo, hi and cells differ in length")
        if not all(h > l for l, h in zip(lo, hi)):
            raise ValidationError("grid.hi", "hi must exceed lo componentwise")
        if not all(c >= 2 for c in cells):
            raise ValidationError("grid.cells", "at least 2 cells per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "cells", cells)

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi)

    @property
    def h(self) -> np.ndarray:
        return (self.hi_array - self.lo_array) / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi_array - self.lo_array))

    def axes(self) -> List[np.ndarray]:
        return [self.lo[k] + (np.arange(self.cells[k]) + 0.5) * self.h[k] for k in range(self.n)]

    def centers(self) -> np.ndarray:
        """Cell centers, shape (*cells, n)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.lo, self.hi, tuple(c * factor for c in self.cells))

    def scaled(self, factor: float, shift: Optional[Sequence[float]] = None) -> "GridSpec":
        off = np.zeros(self.n) if shift is None else np.asarray(shift, dtype=float)
        return GridSpec(tuple(self.lo_array * factor + off), tuple(self.hi_array * factor + off),
                        self.cells)

    def to_json(self) -> Dict[str, Any]:
        return {"lo": list(self.lo), "hi": list(self.hi), "cells": list(self.cells)}

    @staticmethod
    def from_json(doc: Dict[str, Any], field: str = "grid") -> "GridSpec":
        for key in ("lo", "hi", "cells"):
            if key not in doc:
                raise ValidationError(f"{field}.{key}", "missing")
        return GridSpec(doc["lo"], doc["hi"], doc["cells"])


def grid_around(lo, hi, cells: int, padding: float = 0.25) -> GridSpec:
    """
    Grid whose faces align with the box [lo, hi], padded on every side.

    Args:
        lo, hi: box to cover
        cells: cells across the longest side of the box
        padding: padding per side as a fraction of each side

    Returns:
        GridSpec with near-isotropic cells
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValidationError("grid", "cannot build a grid around a degenerate box")
    core = np.maximum(2, np.rint(cells * extent / extent.max())).astype(int)
    h = extent / core
    pad = np.maximum(1, np.ceil(padding * core)).astype(int)
    return GridSpec(tuple(lo - pad * h), tuple(hi + pad * h), tuple(core + 2 * pad))


def _subsample_offsets(grid: GridSpec, subsamples: int) -> np.ndarray:
    frac = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    mesh = np.meshgrid(*([frac] * grid.n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1) * grid.h


def cell_fractions(shape: ShapeExpr, grid: GridSpec, subsamples: int = 4) -> np.ndarray:
    """Fraction of subsample points of each cell lying in `shape`."""
    if shape.dim != grid.n:
        raise DimensionMismatchError("shape", f"shape dimension {shape.dim} vs grid {grid.n}")
    if subsamples < 1:
        raise ValidationError("grid.subsamples", "must be at least 1")
    centers = grid.centers().reshape(-1, grid.n)
    offsets = _subsample_offsets(grid, subsamples)
    out = np.empty(centers.shape[0])
    step = max(1, _BATCH_POINTS // offsets.shape[0])
    for start in range(0, centers.shape[0], step):
        pts = centers[start:start + step, None, :] + offsets[None, :, :]
        inside = shape._inside(pts.reshape(-1, grid.n)).reshape(pts.shape[:2])
        out[start:start + step] = inside.mean(axis=1)
    return out.reshape(grid.cells)


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Occupancy fractions on a grid plus the shape that continues it outside the box."""

    grid: GridSpec
    occupancy: np.ndarray
    exterior: Optional[ShapeExpr] = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=float)
        if occ.shape != self.grid.cells:
            raise ValidationError("occupancy", f"shape {occ.shape} does not match grid {self.grid.cells}")
        if occ.size and (occ.min() < -1e-12 or occ.max() > 1 + 1e-12):
            raise ValidationError("occupancy", "values must lie in [0, 1]")
        if self.exterior is not None and self.exterior.dim != self.grid.n:
            raise DimensionMismatchError("exterior", "exterior and grid differ in dimension")
        object.__setattr__(self, "occupancy", np.clip(occ, 0.0, 1.0))

    @property
    def volume_in_box(self) -> float:
        return float(self.occupancy.sum() * self.grid.cell_volume)

    def exterior_kind(self) -> str:
        """'empty', 'full' or 'general' description of the set outside the box."""
        if self.exterior is None:
            return "empty"
        lo, hi = self.grid.lo_array, self.grid.hi_array
        inner, outer = self.exterior.bounds(), self.exterior.cobounds()
        if inner is not None and (np.any(inner[1] <= inner[0]) or box_inside(inner, lo, hi)):
            return "empty"
        if outer is not None and (np.any(outer[1] <= outer[0]) or box_inside(outer, lo, hi)):
            return "full"
        return "general"

    def complement(self) -> "VoxelSet":
        ext = None if self.exterior is None else Complement(self.exterior)
        if self.exterior is None:
            ext = Complement(Box(self.grid.lo, self.grid.hi))
        return VoxelSet(self.grid, 1.0 - self.occupancy, ext)

    def fingerprint(self) -> bytes:
        """Bytes identifying the occupancy, used as a cache and ordering key."""
        return np.ascontiguousarray(self.occupancy).tobytes()


def voxelize(shape: ShapeExpr, grid: GridSpec, subsamples: int = 4) -> VoxelSet:
    """Occupancy fractions of `shape` on `grid`; the shape itself is kept as exterior."""
    occ = cell_fractions(shape, grid, subsamples)
    logger.debug(f"[GEOMETRY] voxelized {type(shape).__name__} on {grid.cells}: "
                 f"volume in box {occ.sum() * grid.cell_volume:.6g}")
    return VoxelSet(grid, occ, shape)


def volume(vs: VoxelSet, region: Optional[ShapeExpr] = None, subsamples: int = 4) -> float:
    """Volume of the voxel set inside `region` (clipped to the grid box)."""
    grid = vs.grid
    if region is None:
        if vs.exterior_kind() != "empty":
            raise ValidationError("region", "unbounded set needs a bounded region")
        return vs.volume_in_box
    if region.dim != grid.n:
        raise DimensionMismatchError("region", "region and grid differ in dimension")
    if vs.exterior_kind() != "empty" and not box_inside(region.bounds(), grid.lo_array, grid.hi_array):
        raise ValidationError("region", "region extends beyond the grid box of an unbounded set")
    frac = cell_fractions(region, grid, subsamples)
    return float(np.sum(vs.occupancy * frac) * grid.cell_volume)


def save_voxels(path, vs: VoxelSet) -> Path:
    """Write a JSON header next to a little-endian float64 occupancy blob."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    header = {
        "grid": vs.grid.to_json(),
        "dtype": "<f8",
        "order": "C",
        "data": blob.name,
        "exterior": None if vs.exterior is None else vs.exterior.to_json(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    vs.occupancy.astype("<f8").tofile(blob)
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_voxels(path) -> VoxelSet:
    path = Path(path)
    header = json.loads(path.read_text())
    grid = GridSpec.from_json(header["grid"])
    occ = np.fromfile(path.parent / header["data"], dtype=header.get("dtype", "<f8"))
    ext = header.get("exterior")
    return VoxelSet(grid, occ.reshape(grid.cells).astype(float),
                    None if ext is None else shape_from_json(ext, "exterior"))


# ==================== BOUNDARY MESHES ====================

@dataclass(frozen=True, eq=False)
class BoundaryMesh:
    """Boundary samples with outward unit normals and measure weights."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    component: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape != nrm.shape or pts.shape[0] != w.size:
            raise MeshError("mesh", "points, normals and weights disagree in size")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(lengths == 0):
            raise MeshError("mesh.normals", "zero normal")
        nrm = nrm / lengths[:, None]
        if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-12):
            raise MeshError("mesh.normals", "normals are not unit length")
        if np.any(w <= 0):
            raise MeshError("mesh.weights", "weights must be positive")
        comp = np.zeros(w.size, dtype=int) if self.component is None else np.asarray(self.component, dtype=int)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "component", comp)

    def __len__(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    @property
    def spacing(self) -> float:
        """Typical distance between neighbouring samples."""
        if self.dim == 1:
            return 1.0
        return float(np.mean(self.weights) ** (1.0 / (self.dim - 1)))

    def transformed(self, matrix, shift=None) -> "BoundaryMesh":
        """Mesh of the image set under x -> matrix @ x + shift."""
        mat = np.asarray(matrix, dtype=float)
        pts = self.points @ mat.T
        if shift is not None:
            pts = pts + np.asarray(shift, dtype=float)
        pulled = self.normals @ np.linalg.inv(mat)
        stretch = np.linalg.norm(pulled, axis=1)
        return BoundaryMesh(pts, pulled / stretch[:, None],
                            self.weights * abs(np.linalg.det(mat)) * stretch, self.component)

    @staticmethod
    def concatenate(meshes: Sequence["BoundaryMesh"]) -> "BoundaryMesh":
        comps, offset = [], 0
        for m in meshes:
            comps.append(m.component + offset)
            offset = comps[-1].max() + 1
        return BoundaryMesh(np.vstack([m.points for m in meshes]),
                            np.vstack([m.normals for m in meshes]),
                            np.concatenate([m.weights for m in meshes]),
                            np.concatenate(comps))


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _box_mesh(lo: np.ndarray, hi: np.ndarray, resolution: int) -> BoundaryMesh:
    n = lo.size
    ext = hi - lo
    if n == 1:
        return BoundaryMesh(np.array([[lo[0]], [hi[0]]]), np.array([[-1.0], [1.0]]), np.ones(2))
    pts, nrm, wts = [], [], []
    if n == 2:
        perim = 2.0 * ext.sum()
        # counter-clockwise sides: bottom, right, top, left
        sides = [(lo, np.array([1.0, 0.0]), ext[0], np.array([0.0, -1.0])),
                 (np.array([hi[0], lo[1]]), np.array([0.0, 1.0]), ext[1], np.array([1.0, 0.0])),
                 (hi, np.array([-1.0, 0.0]), ext[0], np.array([0.0, 1.0])),
                 (np.array([lo[0], hi[1]]), np.array([0.0, -1.0]), ext[1], np.array([-1.0, 0.0]))]
        for start, direction, length, normal in sides:
            m = max(1, int(round(resolution * length / perim)))
            t = (np.arange(m) + 0.5) * length / m
            pts.append(start + t[:, None] * direction)
            nrm.append(np.tile(normal, (m, 1)))
            wts.append(np.full(m, length / m))
    else:
        m = max(1, int(math.ceil(math.sqrt(resolution / 6.0))))
        for axis in range(3):
            others = [k for k in range(3) if k != axis]
            u = lo[others[0]] + (np.arange(m) + 0.5) * ext[others[0]] / m
            v = lo[others[1]] + (np.arange(m) + 0.5) * ext[others[1]] / m
            uu, vv = [g.ravel() for g in np.meshgrid(u, v, indexing="ij")]
            area = ext[others[0]] * ext[others[1]] / (m * m)
            for side, value in ((-1.0, lo[axis]), (1.0, hi[axis])):
                face = np.empty((uu.size, 3))
                face[:, axis] = value
                face[:, others[0]] = uu
                face[:, others[1]] = vv
                normal = np.zeros(3)
                normal[axis] = side
                pts.append(face)
                nrm.append(np.tile(normal, (uu.size, 1)))
                wts.append(np.full(uu.size, area))
    return BoundaryMesh(np.vstack(pts), np.vstack(nrm), np.concatenate(wts))


def _voxel_mesh(voxels: VoxelSet) -> BoundaryMesh:
    grid = voxels.grid
    occ = np.pad(voxels.occupancy, 1, mode="constant", constant_values=0.0)
    if grid.n == 2:
        pieces = []
        for k, contour in enumerate(measure.find_contours(occ, 0.5)):
            if len(contour) < 4 or not np.allclose(contour[0], contour[-1]):
                continue
            world = grid.lo_array + (contour - 0.5) * grid.h
            seg = np.diff(world, axis=0)
            length = np.linalg.norm(seg, axis=1)
            keep = length > 0
            mids = 0.5 * (world[1:] + world[:-1])[keep]
            tang = seg[keep] / length[keep, None]
            normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
            probe = mids + 0.25 * grid.h.min() * normals
            if np.mean(VoxelShape(voxels)._inside(probe)) > 0.5:
                normals = -normals
            pieces.append(BoundaryMesh(mids, normals, length[keep], np.full(mids.shape[0], k)))
        if not pieces:
            raise UnsupportedShapeError("shape", "voxel set has no closed interface")
        return BoundaryMesh.concatenate(pieces)
    if grid.n == 3:
        verts, faces, _, _ = measure.marching_cubes(occ, 0.5)
        world = grid.lo_array + (verts - 0.5) * grid.h
        tri = world[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        keep = area > 0
        cent = tri[keep].mean(axis=1)
        normals = cross[keep] / (2.0 * area[keep, None])
        probe = cent + 0.25 * grid.h.min() * normals
        flip = VoxelShape(voxels)._inside(probe)
        normals[flip] *= -1.0
        return BoundaryMesh(cent, normals, area[keep])
    raise UnsupportedShapeError("shape", "voxel meshes need n = 2 or 3")


def boundary_mesh(shape: ShapeExpr, resolution: int) -> BoundaryMesh:
    """
    Sample the boundary of a bounded shape.

    Args:
        shape: ball, box, radial graph, voxel shape, or affine images and
            disjoint unions of those
        resolution: number of samples (per component)

    Returns:
        BoundaryMesh with outward normals
    """
    if resolution < 1:
        raise ValidationError("resolution", "must be positive")
    n = shape.dim
    if isinstance(shape, Ball):
        c = np.asarray(shape.center)
        r = shape.radius
        if n == 1:
            return _box_mesh(c - r, c + r, resolution)
        if n == 2:
            phi = 2.0 * math.pi * np.arange(resolution) / resolution
            unit = np.stack([np.cos(phi), np.sin(phi)], axis=1)
            return BoundaryMesh(c + r * unit, unit, np.full(resolution, 2.0 * math.pi * r / resolution))
        unit = _fibonacci_sphere(resolution)
        return BoundaryMesh(c + r * unit, unit, np.full(resolution, 4.0 * math.pi * r * r / resolution))
    if isinstance(shape, Box):
        return _box_mesh(np.asarray(shape.lo), np.asarray(shape.hi), resolution)
    if isinstance(shape, RadialGraph):
        phi = 2.0 * math.pi * np.arange(resolution) / resolution
        r = shape.radius_at(phi)
        dr = shape.radius_derivative(phi)
        cos, sin = np.cos(phi), np.sin(phi)
        pts = np.asarray(shape.center) + np.stack([r * cos, r * sin], axis=1)
        tangent = np.stack([dr * cos - r * sin, dr * sin + r * cos], axis=1)
        speed = np.linalg.norm(tangent, axis=1)
        normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1) / speed[:, None]
        return BoundaryMesh(pts, normals, speed * 2.0 * math.pi / resolution)
    if isinstance(shape, Translate):
        return boundary_mesh(shape.arg, resolution).transformed(np.eye(n), shape.vector)
    if isinstance(shape, Scale):
        return boundary_mesh(shape.arg, resolution).transformed(shape.factor * np.eye(n))
    if isinstance(shape, Linear):
        return boundary_mesh(shape.arg, resolution).transformed(np.asarray(shape.matrix))
    if isinstance(shape, VoxelShape):
        return _voxel_mesh(shape.voxels)
    if isinstance(shape, Union):
        left = boundary_mesh(shape.left, resolution)
        right = boundary_mesh(shape.right, resolution)
        if np.any(shape.right._inside(left.points)) or np.any(shape.left._inside(right.points)):
            raise UnsupportedShapeError("shape", "union operands overlap; mesh is not a boundary")
        return BoundaryMesh.concatenate([left, right])
    raise UnsupportedShapeError("shape", f"no boundary mesh for {type(shape).__name__}")


# ==================== CLASSICAL PERIMETER ====================

def _sphere_measure(n: int, r: float) -> float:
    return {1: 2.0, 2: 2.0 * math.pi * r, 3: 4.0 * math.pi * r * r}[n]


def _region_holds_box(region: Optional[ShapeExpr], lo: np.ndarray, hi: np.ndarray) -> bool:
    if region is None or isinstance(region, FullSpace):
        return True
    if not isinstance(region, (Ball, Box)):
        return False
    corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(lo.size, -1).T
    if isinstance(region, Ball):
        d = corners - np.asarray(region.center)
        return bool(np.all(np.einsum("ij,ij->i", d, d) <= region.radius ** 2))
    return bool(np.all((corners >= np.asarray(region.lo)) & (corners <= np.asarray(region.hi))))


def _plane_box_measure(plane: HalfSpace, lo: np.ndarray, hi: np.ndarray) -> float:
    """Measure of the hyperplane normal . x = offset inside the closed box [lo, hi]."""
    n = lo.size
    normal = np.asarray(plane.normal)
    corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(n, -1).T
    side = corners @ normal - plane.offset
    tol = 1e-12 * (1.0 + float(np.max(np.abs(corners))))
    if n == 1:
        return 1.0 if side.min() <= tol and side.max() >= -tol else 0.0
    pts = [c for c, v in zip(corners, side) if abs(v) <= tol]
    for i, j in zip(*np.nonzero(np.triu(np.ones((len(corners),) * 2), 1))):
        a, b = side[i], side[j]
        if np.count_nonzero(corners[i] != corners[j]) == 1 and min(a, b) < -tol and max(a, b) > tol:
            pts.append(corners[i] + a / (a - b) * (corners[j] - corners[i]))
    if len(pts) < n:
        return 0.0
    pts = np.unique(np.round(np.asarray(pts), 12), axis=0)
    if n == 2:
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).max())
    basis = np.linalg.svd(normal[None, :])[2][1:]
    try:
        return float(ConvexHull(pts @ basis.T).volume)
    except QhullError:
        return 0.0


def _closed_form_perimeter(shape: ShapeExpr, region: Optional[ShapeExpr]) -> Optional[float]:
    n = shape.dim
    if isinstance(shape, Ball):
        lo, hi = shape.bounds()
        if _region_holds_box(region, lo, hi):
            return _sphere_measure(n, shape.radius)
        return None
    if isinstance(shape, Box):
        if _region_holds_box(region, *shape.bounds()):
            ext = np.asarray(shape.hi) - np.asarray(shape.lo)
            if n == 1:
                return 2.0
            if n == 2:
                return float(2.0 * ext.sum())
            return float(2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[2] * ext[0]))
        return None
    if isinstance(shape, (HalfSpace, Complement)) and isinstance(region, Box):
        plane = shape if isinstance(shape, HalfSpace) else shape.arg
        if isinstance(plane, HalfSpace):
            return _plane_box_measure(plane, *region.bounds())
    if isinstance(shape, (HalfSpace, Complement)) and isinstance(region, Ball):
        plane = shape if isinstance(shape, HalfSpace) else shape.arg
        if not isinstance(plane, HalfSpace):
            return None
        d = float(np.asarray(plane.normal) @ np.asarray(region.center) - plane.offset)
        r2 = region.radius ** 2 - d * d
        if r2 <= 0:
            return 0.0
        return {1: 1.0, 2: 2.0 * math.sqrt(r2), 3: math.pi * r2}[n]
    if isinstance(shape, Complement):
        return _closed_form_perimeter(shape.arg, region)
    if isinstance(shape, Translate):
        moved = None if region is None else Translate(region, tuple(-v for v in shape.vector))
        return _closed_form_perimeter(shape.arg, moved)
    if isinstance(shape, Scale):
        moved = None if region is None else Scale(region, 1.0 / shape.factor)
        inner = _closed_form_perimeter(shape.arg, moved)
        return None if inner is None else inner * shape.factor ** (n - 1)
    return None


def classical_perimeter(shape: ShapeExpr, region: Optional[ShapeExpr] = None,
                        cells: int = 256, subsamples: int = 4, padding: float = 0.05) -> float:
    """
    Classical perimeter of `shape` inside the closure of `region`.

    Closed forms cover balls, boxes and half-spaces cut by balls or boxes; everything
    else goes through the occupancy 1/2 level set of a voxelization.
    """
    if region is not None and region.dim != shape.dim:
        raise DimensionMismatchError("region", "region and shape differ in dimension")
    exact = _closed_form_perimeter(shape, region)
    if exact is not None:
        return exact
    box = None if region is None else region.bounds()
    if box is None:
        box = shape_extent(shape)
    if box is None or shape.dim == 1:
        raise UnsupportedShapeError("shape", "no closed form and no bounded box to voxelize in")
    grid = grid_around(box[0], box[1], cells, padding)
    vs = voxelize(shape, grid, subsamples)
    occ = vs.occupancy
    if shape.dim == 2:
        total = 0.0
        for contour in measure.find_contours(occ, 0.5):
            world = grid.lo_array + (contour + 0.5) * grid.h
            mids = 0.5 * (world[1:] + world[:-1])
            length = np.linalg.norm(np.diff(world, axis=0), axis=1)
            if region is not None:
                length = length[region._inside(mids)]
            total += float(length.sum())
        return total
    verts, faces, _, _ = measure.marching_cubes(occ, 0.5, spacing=tuple(grid.h))
    world = grid.lo_array + verts + 0.5 * grid.h
    tri = world[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if region is not None:
        area = area[region._inside(tri.mean(axis=1))]
    return float(area.sum())
