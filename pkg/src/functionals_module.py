"""
Functionals Module
Fractional perimeters, mass at infinity, fractional mean curvature,
Fraenkel asymmetry, isoperimetric reports and the nonlocal second
variation form.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import (
    CornerError,
    DivergentIntegralError,
    MeshError,
    NotOnBoundaryError,
    ValidationError,
)
from .geometry_module import (
    Ball,
    BoundaryMesh,
    Box,
    Complement,
    EmptySet,
    GridSpec,
    Intersection,
    Linear,
    RadialGraph,
    Scale,
    ShapeExpr,
    Translate,
    Union as ShapeUnion,
    VoxelSet,
    VoxelShape,
    boundary_mesh,
    cell_fractions,
    classical_perimeter,
    cone_aperture,
    grid_around,
    shape_extent,
    volume,
    voxelize,
)
from .quadrature_module import (
    UNIT_BALL_VOLUME,
    InteractionEstimate,
    KernelParams,
    QuadratureOptions,
    ZERO,
    angular_rule,
    frame_rotation,
    interaction,
    ordered_map,
    rule_with_error,
    tail_integral_estimate,
    trace_rays,
)

logger = logging.getLogger(__name__)

SetLike = Union[ShapeExpr, VoxelSet]


def _as_shape(e: SetLike) -> ShapeExpr:
    return VoxelShape(e) if isinstance(e, VoxelSet) else e


def _sphere_area(m: int) -> float:
    """H^m of the unit sphere S^m."""
    return (m + 1) * UNIT_BALL_VOLUME[m + 1] if m >= 0 else 0.0


def _check_s_list(s_list: Sequence[float], field_name: str, minimum: int = 3) -> List[float]:
    values = [float(s) for s in s_list]
    if len(values) < minimum:
        raise ValidationError(field_name, f"needs at least {minimum} values")
    if any(not 0.0 < s < 1.0 for s in values):
        raise ValidationError(field_name, "values must lie in (0, 1)")
    return values


def _linear_extrapolation(xs: Sequence[float], ys: Sequence[float], at: float) -> Tuple[float, float]:
    """Least-squares line through (xs, ys) evaluated at `at`, with RMS residual."""
    coeffs = np.polyfit(np.asarray(xs), np.asarray(ys), 1)
    residual = float(np.sqrt(np.mean((np.polyval(coeffs, xs) - np.asarray(ys)) ** 2)))
    return float(np.polyval(coeffs, at)), residual


# ==================== PERIMETERS ====================

@dataclass(frozen=True)
class PerimeterReport:
    """
    Local s-perimeter split into its three interactions:
    (E in Omega vs E^c in Omega), (E in Omega vs E^c outside Omega),
    (E outside Omega vs E^c in Omega).
    """

    terms: Tuple[float, float, float]
    term_errors: Tuple[float, float, float]
    kernel: KernelParams

    @property
    def total(self) -> float:
        return math.fsum(self.terms)

    @property
    def error_bound(self) -> float:
        return math.fsum(self.term_errors)

    @property
    def estimate(self) -> InteractionEstimate:
        return InteractionEstimate(self.total, self.error_bound)

    def to_json(self) -> Dict:
        return {
            "terms": [{"value": v, "error_bound": e} for v, e in zip(self.terms, self.term_errors)],
            "total": {"value": self.total, "error_bound": self.error_bound},
            "kernel": self.kernel.to_json(),
        }


def per_s_local(e: SetLike, omega: ShapeExpr, k: KernelParams,
                opts: Optional[QuadratureOptions] = None, cells: int = 64,
                subsamples: int = 4, padding: float = 0.25) -> PerimeterReport:
    """
    Per_s(E, Omega) on a grid aligned with the bounding box of Omega.

    The interaction between E outside Omega and E^c outside Omega is omitted.
    """
    opts = opts or QuadratureOptions()
    shape = _as_shape(e)
    if shape.dim != k.n or omega.dim != k.n:
        raise ValidationError("kernel.n", "kernel, set and domain dimensions differ")
    box = omega.bounds()
    if box is None or np.any(box[1] <= box[0]):
        raise ValidationError("omega", "domain must be bounded with positive extent")
    grid = grid_around(box[0], box[1], cells, padding)
    inside_e = voxelize(Intersection(shape, omega), grid, subsamples)
    inside_c = voxelize(Intersection(Complement(shape), omega), grid, subsamples)
    outside_c = voxelize(Intersection(Complement(shape), Complement(omega)), grid, subsamples)
    outside_e = voxelize(Intersection(shape, Complement(omega)), grid, subsamples)
    t1 = interaction(inside_e, inside_c, k, opts)
    t2 = interaction(inside_e, outside_c, k, opts)
    t3 = interaction(outside_e, inside_c, k, opts)
    report = PerimeterReport((t1.value, t2.value, t3.value),
                             (t1.error_bound, t2.error_bound, t3.error_bound), k)
    logger.info(f"[GEOMETRY] Per_s(E, Omega) = {report.total:.8g} +/- {report.error_bound:.2g} (s={k.s:g})")
    return report


def _smooth_meshable(shape: ShapeExpr) -> bool:
    if isinstance(shape, (Ball, RadialGraph)):
        return True
    if shape.dim == 1 and isinstance(shape, Box):
        return True
    if isinstance(shape, (Translate, Scale, Linear)):
        return _smooth_meshable(shape.arg)
    if isinstance(shape, ShapeUnion):
        return _smooth_meshable(shape.left) and _smooth_meshable(shape.right)
    return False


def resolve_method(shape: SetLike, method: str) -> str:
    if method not in ("auto", "grid", "boundary"):
        raise ValidationError("method", f"unknown method '{method}'")
    if method != "auto":
        return method
    if isinstance(shape, ShapeExpr) and shape.dim <= 2 and _smooth_meshable(shape):
        return "boundary"
    return "grid"


def boundary_double_integral(mesh: BoundaryMesh, s: float) -> float:
    """
    (1-s)/(n+s-2) * int int nu_x . nu_y |x-y|^(2-n-s) over the boundary.

    Punctured trapezoid rule; in the plane each point adds the
    zeta-function correction -2 zeta(s) w^(1-s) for its own neighbourhood.
    """
    n = mesh.dim
    x, nu, w = mesh.points, mesh.normals, mesh.weights
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, 1.0)
    kern = dist ** (2.0 - n - s)
    np.fill_diagonal(kern, 0.0)
    total = float(w @ ((nu @ nu.T) * kern) @ w)
    if n == 2:
        zeta = 1.0 + special.zetac(s)
        total += float(np.sum(w * (-2.0 * zeta) * w ** (1.0 - s)))
    return (1.0 - s) / (n + s - 2.0) * total


def per_s_global(e: SetLike, k: KernelParams, opts: Optional[QuadratureOptions] = None,
                 method: str = "auto", cells: int = 64, resolution: int = 1024,
                 padding: float = 0.25) -> InteractionEstimate:
    """
    Per_s(E, R^n) = I_s(E, E^c) for a bounded set.

    Methods:
        grid: dense engine on grids h and h/2, Richardson step at rate h^(1-s)
        boundary: boundary double-integral identity (n = 1, 2)
        auto: boundary for smooth meshable shapes in n <= 2, grid otherwise
    """
    opts = opts or QuadratureOptions()
    if isinstance(e, EmptySet):
        return ZERO
    shape = _as_shape(e)
    if shape.dim != k.n:
        raise ValidationError("kernel.n", "kernel and set dimension differ")
    if isinstance(e, VoxelSet):
        if e.exterior_kind() != "empty":
            raise DivergentIntegralError("set reaches outside its grid box")
        return interaction(e, e.complement(), k, opts)
    box = shape.bounds()
    if box is None:
        raise DivergentIntegralError("Per_s(E, R^n) needs a bounded set")
    if np.all(box[1] <= box[0]):
        return ZERO
    chosen = resolve_method(shape, method)
    if chosen == "boundary":
        if k.n == 3:
            raise ValidationError("method", "boundary method supports n = 1, 2")
        mesh = boundary_mesh(shape, resolution)
        value = boundary_double_integral(mesh, k.s)
        if k.n == 1:
            return InteractionEstimate(value, 0.0)
        coarse = boundary_double_integral(boundary_mesh(shape, max(8, resolution // 2)), k.s)
        return InteractionEstimate(value, abs(value - coarse))
    grid = grid_around(box[0], box[1], cells, padding)
    values = []
    for g in (grid, grid.refined(2)):
        inside = voxelize(shape, g)
        values.append(interaction(inside, voxelize(Complement(shape), g), k, opts))
    coarse, fine = values
    ratio = 2.0 ** (1.0 - k.s)
    correction = (fine.value - coarse.value) / (ratio - 1.0)
    result = InteractionEstimate(fine.value + correction,
                                 fine.error_bound + coarse.error_bound + abs(correction))
    logger.info(f"[GEOMETRY] Per_s(E) = {result.value:.8g} +/- {result.error_bound:.2g} "
                f"(grid {grid.cells} and {tuple(2 * c for c in grid.cells)}, s={k.s:g})")
    return result


@dataclass(frozen=True)
class SweepPoint:
    s: float
    value: float
    error_bound: float


def perimeter_sweep(e: SetLike, omega: Optional[ShapeExpr], s_list: Sequence[float], n: int,
                    opts: Optional[QuadratureOptions] = None, cells: int = 64,
                    method: str = "auto", padding: float = 0.25) -> List[SweepPoint]:
    """Per_s over a list of s; global perimeter when omega is None."""
    points = []
    for s in _check_s_list(s_list, "kernel.s_list", minimum=1):
        k = KernelParams(n, s)
        if omega is None:
            est = per_s_global(e, k, opts, method=method, cells=cells, padding=padding)
        else:
            est = per_s_local(e, omega, k, opts, cells=cells, padding=padding).estimate
        points.append(SweepPoint(s, est.value, est.error_bound))
    return points


# ==================== MASS AT INFINITY ====================

@dataclass(frozen=True)
class ZetaEstimate:
    samples: Tuple[Tuple[float, float], ...]
    sample_errors: Tuple[float, ...]
    extrapolated: float
    fit_residual: float
    exact: bool = False
    limit_flagged: bool = False

    def to_json(self) -> Dict:
        return {
            "samples": [{"s": s, "value": v, "error_bound": e}
                        for (s, v), e in zip(self.samples, self.sample_errors)],
            "extrapolated": {"value": self.extrapolated, "error_bound": self.fit_residual},
            "exact": self.exact,
            "limit_may_not_exist": self.limit_flagged,
        }


def zeta_cone_exact(aperture_fraction: float) -> float:
    """Mass at infinity of a cone: its aperture fraction."""
    a = float(aperture_fraction)
    if not 0.0 <= a <= 1.0:
        raise ValidationError("aperture_fraction", "must lie in [0, 1]")
    return a


def zeta_estimate(e: ShapeExpr, s_list: Sequence[float], opts: Optional[QuadratureOptions] = None,
                  residual_tol: float = 1e-2) -> ZetaEstimate:
    """
    Samples s/(n omega_n) * int_{E outside B_1} |x|^-(n+s) dx over s_list and
    their linear extrapolation to s = 0, clamped to [0, 1].
    """
    values = _check_s_list(s_list, "zeta.s_list")
    if any(a <= b for a, b in zip(values, values[1:])):
        raise ValidationError("zeta.s_list", "must be strictly descending")
    n = e.dim
    samples, errors = [], []
    for s in values:
        k = KernelParams(n, s)
        tail = tail_integral_estimate(e, 1.0, k, opts)
        scale = s / k.sphere_area
        samples.append((s, tail.value * scale))
        errors.append(tail.error_bound * scale)
    aperture = cone_aperture(e)
    if aperture is not None:
        return ZetaEstimate(tuple(samples), tuple(errors), aperture, 0.0, exact=True)
    intercept, residual = _linear_extrapolation([s for s, _ in samples], [v for _, v in samples], 0.0)
    flagged = residual > residual_tol
    if flagged:
        logger.warning(f"[GEOMETRY] zeta fit residual {residual:.3g} exceeds {residual_tol:g}; "
                       f"the limit may not exist")
    return ZetaEstimate(tuple(samples), tuple(errors), float(np.clip(intercept, 0.0, 1.0)),
                        residual, exact=False, limit_flagged=flagged)


def _s0_volumes(e: SetLike, omega: ShapeExpr, cells: int, padding: float) -> Tuple[float, float, float]:
    """|E in Omega|, |E^c in Omega| and the volume of cells cut by either boundary."""
    shape = _as_shape(e)
    box = omega.bounds()
    if box is None:
        raise ValidationError("omega", "domain must be bounded")
    grid = grid_around(box[0], box[1], cells, padding)
    inside_vs = voxelize(shape, grid)
    inside = volume(inside_vs, omega)
    outside = volume(voxelize(Complement(shape), grid), omega)
    region = cell_fractions(omega, grid)
    occ = inside_vs.occupancy
    cut = ((region > 0) & (region < 1)) | ((region > 0) & (occ > 0) & (occ < 1))
    return inside, outside, float(np.count_nonzero(cut)) * grid.cell_volume


def s0_limit_prediction(e: SetLike, omega: ShapeExpr, zeta: float, cells: int = 128,
                        padding: float = 0.25) -> float:
    """(1 - zeta) |E in Omega| + zeta |E^c in Omega|."""
    if not 0.0 <= zeta <= 1.0:
        raise ValidationError("zeta", "must lie in [0, 1]")
    inside, outside, _ = _s0_volumes(e, omega, cells, padding)
    return (1.0 - zeta) * inside + zeta * outside


@dataclass(frozen=True)
class LimitCheck:
    """An s-sweep extrapolated to an endpoint and compared with its prediction."""

    samples: Tuple[SweepPoint, ...]
    limit_s: float
    extrapolated: float
    fit_residual: float
    prediction: float
    prediction_error: float
    details: Dict = field(default_factory=dict)

    @property
    def relative_gap(self) -> float:
        return abs(self.extrapolated - self.prediction) / max(abs(self.prediction), 1e-300)

    @property
    def relative_gap_error(self) -> float:
        scale = max(abs(self.prediction) - self.prediction_error, 1e-300)
        return (self.fit_residual + self.prediction_error * (1.0 + self.relative_gap)) / scale

    def to_json(self) -> Dict:
        return {
            "samples": [{"s": p.s, "value": p.value, "error_bound": p.error_bound} for p in self.samples],
            "limit_s": self.limit_s,
            "extrapolated": {"value": self.extrapolated, "error_bound": self.fit_residual},
            "prediction": {"value": self.prediction, "error_bound": self.prediction_error},
            "relative_gap": {"value": self.relative_gap, "error_bound": self.relative_gap_error},
            **self.details,
        }


def s0_check(e: ShapeExpr, omega: ShapeExpr, s_list: Sequence[float],
             opts: Optional[QuadratureOptions] = None, cells: int = 64,
             prediction_cells: int = 128, padding: float = 0.25) -> LimitCheck:
    """
    Per_s(E, Omega)/(n omega_n) extrapolated to s = 0 against the mass-at-infinity
    prediction. The factor n omega_n comes from the s(1-s) normalization.
    """
    values = _check_s_list(s_list, "kernel.s_list")
    n = e.dim
    sweep = perimeter_sweep(e, omega, values, n, opts, cells, padding=padding)
    scale = 1.0 / (n * UNIT_BALL_VOLUME[n])
    samples = tuple(SweepPoint(p.s, p.value * scale, p.error_bound * scale) for p in sweep)
    intercept, residual = _linear_extrapolation([p.s for p in samples], [p.value for p in samples], 0.0)
    zeta = zeta_estimate(e, sorted(values, reverse=True), opts)
    inside, outside, cut = _s0_volumes(e, omega, prediction_cells, padding)
    prediction = (1.0 - zeta.extrapolated) * inside + zeta.extrapolated * outside
    prediction_error = zeta.fit_residual * abs(outside - inside) + cut
    check = LimitCheck(samples, 0.0, intercept, residual, prediction, prediction_error,
                       {"zeta": {"value": zeta.extrapolated, "error_bound": zeta.fit_residual},
                        "normalization": "divided by n*omega_n"})
    logger.info(f"[GEOMETRY] s->0: extrapolated {intercept:.6g}, predicted {prediction:.6g} "
                f"(gap {check.relative_gap:.2%})")
    return check


def s1_check(e: ShapeExpr, omega: ShapeExpr, s_list: Sequence[float],
             opts: Optional[QuadratureOptions] = None, cells: int = 64,
             padding: float = 0.25) -> LimitCheck:
    """Per_s(E, Omega) extrapolated to s = 1 against omega_(n-1) Per(E, closure Omega)."""
    values = _check_s_list(s_list, "kernel.s_list")
    n = e.dim
    sweep = perimeter_sweep(e, omega, values, n, opts, cells, padding=padding)
    limit, residual = _linear_extrapolation([p.s for p in sweep], [p.value for p in sweep], 1.0)
    classical = classical_perimeter(e, omega)
    classical_error = abs(classical - classical_perimeter(e, omega, cells=128))
    prediction = UNIT_BALL_VOLUME[n - 1] * classical
    check = LimitCheck(tuple(sweep), 1.0, limit, residual, prediction,
                       UNIT_BALL_VOLUME[n - 1] * classical_error,
                       {"classical_perimeter": {"value": classical, "error_bound": classical_error}})
    logger.info(f"[GEOMETRY] s->1: extrapolated {limit:.6g}, predicted {prediction:.6g} "
                f"(gap {check.relative_gap:.2%})")
    return check


# ==================== FRACTIONAL MEAN CURVATURE ====================

@dataclass(frozen=True, eq=False)
class _PointTrace:
    normal: np.ndarray
    kappa: float
    kappa_error: float
    delta: float
    radial: object
    weights: np.ndarray
    parity: np.ndarray


def _opening(shape: ShapeExpr, x: np.ndarray, e1: np.ndarray, e2: np.ndarray, eps: float,
             opts: QuadratureOptions, count: int) -> Optional[Tuple[float, float]]:
    """(start angle, opening angle of the complement) on the circle of radius eps, None if not two crossings."""
    step = 2.0 * math.pi / count
    alphas = (np.arange(count) + 0.5) * step

    def at(angle):
        return x + eps * (np.cos(angle)[:, None] * e1 + np.sin(angle)[:, None] * e2)

    inside = shape._inside(at(alphas))
    trans = np.nonzero(inside != np.roll(inside, -1))[0]
    if trans.size == 0:
        raise NotOnBoundaryError("x", "point is not on the boundary of the set")
    if trans.size != 2:
        return None
    lo = alphas[trans]
    hi = lo + step
    state = inside[trans]
    for _ in range(opts.bisection_steps):
        mid = 0.5 * (lo + hi)
        same = shape._inside(at(mid)) == state
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    cross = 0.5 * (lo + hi)
    start = cross[state][0]
    return start, (cross[~state][0] - start) % (2.0 * math.pi)


def _plane_curve(shape: ShapeExpr, x: np.ndarray, e1: np.ndarray, e2: np.ndarray, eps: float,
                 opts: QuadratureOptions, count: int = 64,
                 halvings: int = 6) -> Tuple[np.ndarray, float, float]:
    """
    In-plane outward normal, curvature and curvature error of the boundary
    curve through x.

    A smooth curve opens past pi by about kappa * eps, so the deviation
    halves with the circle radius; a corner keeps it. The radius is halved
    until the deviation is small, and the curvature is compared with the
    one at half that radius.
    """
    previous = None
    for _ in range(halvings + 1):
        found = _opening(shape, x, e1, e2, eps, opts, count)
        if found is not None:
            deviation = found[1] - math.pi
            if abs(deviation) <= 0.2:
                break
            if previous is not None and abs(deviation) > 0.75 * abs(previous):
                raise CornerError("x", f"opening angle {found[1]:.3f} indicates a corner")
            previous = deviation
        eps /= 2.0
    else:
        raise CornerError("x", "no smooth crossing pair at any circle radius")
    start, theta_out = found
    kappa = (theta_out - math.pi) / eps
    half = _opening(shape, x, e1, e2, eps / 2.0, opts, count)
    error = abs(kappa - (half[1] - math.pi) / (eps / 2.0)) if half is not None else abs(kappa)
    bis = start + theta_out / 2.0
    normal = math.cos(bis) * e1 + math.sin(bis) * e2
    return normal, kappa, error


def _estimate_normal(shape: ShapeExpr, x: np.ndarray, eps: float,
                     opts: QuadratureOptions) -> Tuple[np.ndarray, float, float]:
    n = x.size
    if n == 1:
        below, above = shape._inside(np.array([[x[0] - eps], [x[0] + eps]]))
        if below == above:
            raise NotOnBoundaryError("x", "point is not on the boundary of the set")
        return np.array([1.0 if below else -1.0]), 0.0, 0.0
    if n == 2:
        return _plane_curve(shape, x, np.array([1.0, 0.0]), np.array([0.0, 1.0]), eps, opts)
    dirs, _, _ = angular_rule(3, 256)
    inside = shape._inside(x + eps * dirs)
    if inside.all() or not inside.any():
        raise NotOnBoundaryError("x", "point is not on the boundary of the set")
    rough = dirs[~inside].mean(axis=0) - dirs[inside].mean(axis=0)
    rough /= np.linalg.norm(rough)
    frame = frame_rotation(rough)
    tangents, kappa, kappa_err = [], 0.0, 0.0
    for t in (frame[:, 0], frame[:, 1]):
        nrm, kap, err = _plane_curve(shape, x, t, rough, eps, opts)
        tangents.append((nrm @ rough) * t - (nrm @ t) * rough)
        kappa += kap
        kappa_err += err
    normal = np.cross(tangents[0], tangents[1])
    normal /= np.linalg.norm(normal)
    if normal @ rough < 0:
        normal = -normal
    return normal, kappa, kappa_err


def _default_pv_radius(shape: ShapeExpr) -> float:
    box = shape_extent(shape)
    if box is None:
        return 1.0 / 32.0
    diam = float(np.linalg.norm(box[1] - box[0]))
    return diam / 64.0 if diam > 0 else 1.0 / 32.0


def _far_diameter(shape: ShapeExpr, x: np.ndarray) -> float:
    box = shape_extent(shape)
    if box is None:
        return max(1.0, 2.0 * float(np.linalg.norm(x)))
    return max(float(np.linalg.norm(box[1] - box[0])), 2.0 * float(np.linalg.norm(x)), 1e-6)


@lru_cache(maxsize=4096)
def _trace_point(shape: ShapeExpr, point: Tuple[float, ...], delta: float,
                 opts: QuadratureOptions) -> _PointTrace:
    x = np.asarray(point)
    normal, kappa, kappa_error = _estimate_normal(shape, x, delta / 4.0, opts)
    dirs, weights, parity = angular_rule(x.size, opts.angular_nodes)
    world = dirs @ frame_rotation(normal).T
    starts = np.full((1, world.shape[0]), delta)
    profile = trace_rays(shape, x[None, :], world[None], starts,
                         opts.far_radius(_far_diameter(shape, x)), opts)
    return _PointTrace(normal, kappa, kappa_error, delta, profile, weights, parity)


@dataclass(frozen=True)
class CurvatureEstimate:
    value: float
    error_bound: float
    normal: Tuple[float, ...]
    classical: float
    classical_error: float
    pv_radius: float

    def to_json(self) -> Dict:
        return {
            "curvature": {"value": self.value, "error_bound": self.error_bound},
            "normal": list(self.normal),
            "classical_curvature": {"value": self.classical, "error_bound": self.classical_error},
            "pv_radius": {"value": self.pv_radius, "tolerance": 0.0},
        }


def _local_term(n: int, s: float, kappa: float, delta: float) -> float:
    if n == 1:
        return 0.0
    return s * _sphere_area(n - 2) / (n - 1) * kappa * delta ** (1.0 - s)


def curvature_estimate(e: SetLike, x, k: KernelParams, opts: Optional[QuadratureOptions] = None,
                       pv_radius: Optional[float] = None,
                       local_correction: bool = False) -> CurvatureEstimate:
    """
    H^s_E(x) = s(1-s) PV int (chi_{E^c} - chi_E)(y) |x-y|^-(n+s) dy.

    The ball of radius pv_radius around x is excluded; rays are laid out in a
    frame attached to the estimated normal. The error bound adds the size of
    the excluded-ball contribution predicted by the local curvature, which
    `local_correction` adds to the value instead of dropping.
    """
    opts = opts or QuadratureOptions()
    shape = _as_shape(e)
    point = np.asarray(x, dtype=float)
    if point.shape != (k.n,) or shape.dim != k.n:
        raise ValidationError("x", f"expected a point in R^{k.n}")
    delta = float(pv_radius) if pv_radius is not None else _default_pv_radius(shape)
    if not delta > 0:
        raise ValidationError("curvature.pv_radius", "must be positive")
    tr = _trace_point(shape, tuple(float(v) for v in point), delta, opts)
    s = k.s
    per_ray = delta ** (-s) / s - 2.0 * tr.radial.integral(s)[0]
    value, ang = rule_with_error(per_ray, tr.weights, tr.parity)
    trunc = 2.0 * float(tr.radial.truncation(s)[0] @ tr.weights)
    local = _local_term(k.n, s, tr.kappa, delta)
    value = k.normalization * float(value)
    error = k.normalization * (float(ang) + trunc)
    if local_correction:
        value += local
        error += abs(_local_term(k.n, s, tr.kappa_error, delta))
    else:
        error += abs(local)
    return CurvatureEstimate(value, error, tuple(tr.normal), tr.kappa, tr.kappa_error, delta)


def fractional_mean_curvature(e: SetLike, x, k: KernelParams, opts: Optional[QuadratureOptions] = None,
                              pv_radius: Optional[float] = None) -> float:
    return curvature_estimate(e, x, k, opts, pv_radius).value


@dataclass(frozen=True, eq=False)
class CurvatureProfile:
    mesh: BoundaryMesh
    values: np.ndarray
    errors: np.ndarray
    classical: np.ndarray
    classical_errors: np.ndarray
    pv_radius: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def rel_std(self) -> float:
        mean = self.mean
        return float(np.std(self.values) / abs(mean)) if mean != 0 else float("inf")

    @property
    def spread(self) -> float:
        """(max - min) / |mean| of the profile."""
        mean = self.mean
        return float(np.ptp(self.values) / abs(mean)) if mean != 0 else float("inf")

    def _relative_error(self, statistic: float, width: float) -> float:
        """First-order bound when every value moves by at most max(errors)."""
        worst = float(np.max(self.errors))
        mean = abs(self.mean)
        if mean <= worst:
            return float("inf")
        return (width * worst + statistic * worst) / (mean - worst)

    def to_json(self) -> Dict:
        classical_mean = max(abs(float(np.mean(self.classical))), 1e-300)
        return {
            "mean": {"value": self.mean, "error_bound": float(np.max(self.errors))},
            "rel_std": {"value": self.rel_std, "error_bound": self._relative_error(self.rel_std, 1.0)},
            "spread": {"value": self.spread, "error_bound": self._relative_error(self.spread, 2.0)},
            "pv_radius": {"value": self.pv_radius, "tolerance": 0.0},
            "points": len(self.values),
            "classical_curvature_rel_std": {
                "value": float(np.std(self.classical)) / classical_mean,
                "error_bound": float(np.max(self.classical_errors)) / classical_mean,
            },
        }


def curvature_profile(e: SetLike, mesh: BoundaryMesh, k: KernelParams,
                      opts: Optional[QuadratureOptions] = None, pv_radius: Optional[float] = None,
                      local_correction: bool = False) -> CurvatureProfile:
    """H^s at every mesh point; the PV radius defaults to twice the mesh spacing."""
    delta = float(pv_radius) if pv_radius is not None else 2.0 * mesh.spacing
    results = ordered_map(lambda p: curvature_estimate(e, p, k, opts, delta, local_correction),
                          list(mesh.points))
    profile = CurvatureProfile(mesh, np.array([r.value for r in results]),
                               np.array([r.error_bound for r in results]),
                               np.array([r.classical for r in results]),
                               np.array([r.classical_error for r in results]), delta)
    logger.info(f"[CURVATURE] profile over {len(mesh)} points: mean {profile.mean:.6g}, "
                f"rel std {profile.rel_std:.3%}")
    return profile


@dataclass(frozen=True)
class CurvatureSweep:
    points: Tuple[SweepPoint, ...]
    extrapolated: float
    fit_residual: float
    classical_limit: float
    classical_limit_error: float = 0.0

    def to_json(self) -> Dict:
        return {
            "samples": [{"s": p.s, "value": p.value, "error_bound": p.error_bound} for p in self.points],
            "extrapolated": {"value": self.extrapolated, "error_bound": self.fit_residual},
            "classical_limit": {"value": self.classical_limit, "error_bound": self.classical_limit_error},
        }


def curvature_s_sweep(e: SetLike, x, s_list: Sequence[float], opts: Optional[QuadratureOptions] = None,
                      pv_radius: Optional[float] = None) -> CurvatureSweep:
    """
    H^s at one point over s_list with the excluded ball filled in from the
    local curvature, extrapolated to s = 1 and compared with
    omega_(n-1) times the sum of principal curvatures.
    """
    values = _check_s_list(s_list, "kernel.s_list", minimum=2)
    n = _as_shape(e).dim
    points, last = [], None
    for s in values:
        last = curvature_estimate(e, x, KernelParams(n, s), opts, pv_radius, local_correction=True)
        points.append(SweepPoint(s, last.value, last.error_bound))
    limit, residual = _linear_extrapolation([p.s for p in points], [p.value for p in points], 1.0)
    scale = UNIT_BALL_VOLUME[n - 1]
    return CurvatureSweep(tuple(points), limit, residual, scale * last.classical, scale * last.classical_error)


# ==================== ASYMMETRY AND ISOPERIMETRY ====================

def _ball_coverage(grid: GridSpec, center: np.ndarray, radius: float) -> np.ndarray:
    """
    Smoothed fraction of each cell inside the ball: distribution function of
    the cell's projection onto the radial direction, a sum of uniforms.
    """
    n = grid.n
    rel = grid.centers().reshape(-1, n) - center
    dist = np.linalg.norm(rel, axis=1)
    nu = rel / np.maximum(dist, 1e-300)[:, None]
    half = np.maximum(np.abs(nu) * grid.h / 2.0, 1e-6 * grid.h)
    t = radius - dist
    total = np.zeros_like(t)
    for signs in np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T:
        total += np.prod(signs) * np.maximum(t + half @ signs, 0.0) ** n
    coverage = total / (math.factorial(n) * np.prod(2.0 * half, axis=1))
    return np.clip(coverage, 0.0, 1.0).reshape(grid.cells)


def asymmetry_objective(voxels: VoxelSet, center, radius: float) -> float:
    """|E symmetric-difference B_radius(center)| / |E| with |B| = |E|."""
    vol = voxels.volume_in_box
    if vol <= 0:
        raise ValidationError("shape", "set has zero volume")
    overlap = float(np.sum(voxels.occupancy * _ball_coverage(voxels.grid, np.asarray(center, dtype=float),
                                                             radius))) * voxels.grid.cell_volume
    return float(np.clip(2.0 * (1.0 - overlap / vol), 0.0, 2.0))


def _voxels_of(e: SetLike, cells: int, padding: float = 0.25) -> VoxelSet:
    if isinstance(e, VoxelSet):
        return e
    box = e.bounds()
    if box is None:
        raise ValidationError("shape", "set must be bounded")
    if np.all(box[1] <= box[0]):
        raise ValidationError("shape", "set has zero volume")
    return voxelize(e, grid_around(box[0], box[1], cells, padding))


def fraenkel_asymmetry_estimate(e: SetLike, cells: int = 128,
                                padding: float = 0.25) -> Tuple[float, np.ndarray, float]:
    """
    Fraenkel asymmetry, the optimal ball center and a voxel tolerance.

    Local search from the centroid: coarse grid of offsets up to 8h, then
    coordinate descent down to 1e-4 times the equal-volume radius. The
    tolerance is the volume of cells cut by the boundary relative to |E|.
    """
    vs = _voxels_of(e, cells, padding)
    n = vs.grid.n
    vol = vs.volume_in_box
    if vol <= 0:
        raise ValidationError("shape", "set has zero volume")
    radius = (vol / UNIT_BALL_VOLUME[n]) ** (1.0 / n)
    centers = vs.grid.centers().reshape(-1, n)
    weights = vs.occupancy.ravel()
    centroid = centers.T @ weights / weights.sum()
    h = float(vs.grid.h.max())
    best, best_val = centroid, asymmetry_objective(vs, centroid, radius)
    steps = np.array([-8.0, -4.0, 0.0, 4.0, 8.0]) * h
    for offset in np.array(np.meshgrid(*([steps] * n), indexing="ij")).reshape(n, -1).T:
        val = asymmetry_objective(vs, centroid + offset, radius)
        if val < best_val:
            best, best_val = centroid + offset, val
    step = 4.0 * h
    while step >= 1e-4 * radius:
        improved = False
        for axis in range(n):
            for sign in (1.0, -1.0):
                trial = best.copy()
                trial[axis] += sign * step
                val = asymmetry_objective(vs, trial, radius)
                if val < best_val:
                    best, best_val, improved = trial, val, True
        if not improved:
            step /= 2.0
    cut = np.count_nonzero((vs.occupancy > 0) & (vs.occupancy < 1)) * vs.grid.cell_volume
    return float(np.clip(best_val, 0.0, 2.0)), best, float(cut / vol)


def fraenkel_asymmetry(e: SetLike, cells: int = 128, padding: float = 0.25) -> Tuple[float, np.ndarray]:
    """Fraenkel asymmetry and the optimal ball center."""
    asym, center, _ = fraenkel_asymmetry_estimate(e, cells, padding)
    return asym, center


@dataclass(frozen=True)
class IsoperimetricReport:
    perimeter_global: InteractionEstimate
    volume: float
    volume_error: float
    ratio: float
    ratio_error: float
    ball_ratio: float
    ball_ratio_error: float
    deficit: float
    deficit_error: float
    asymmetry: float
    asymmetry_tolerance: float
    asymmetry_center: Tuple[float, ...]
    method: str

    @property
    def stability_ratio(self) -> Optional[float]:
        """A(E)^2 / deficit, the observed constant of the stable inequality."""
        return self.asymmetry ** 2 / self.deficit if self.deficit > self.deficit_error else None

    def to_json(self) -> Dict:
        stability = self.stability_ratio
        if stability is not None:
            rel = self.deficit_error / self.deficit
            if self.asymmetry > 0:
                rel += 2.0 * self.asymmetry_tolerance / self.asymmetry
            stability = {"value": stability, "error_bound": stability * rel}
        return {
            "perimeter_global": self.perimeter_global.to_json(),
            "volume": {"value": self.volume, "error_bound": self.volume_error},
            "ratio": {"value": self.ratio, "error_bound": self.ratio_error},
            "ball_ratio": {"value": self.ball_ratio, "error_bound": self.ball_ratio_error},
            "deficit": {"value": self.deficit, "error_bound": self.deficit_error},
            "asymmetry": {"value": self.asymmetry, "tolerance": self.asymmetry_tolerance},
            "asymmetry_center": list(self.asymmetry_center),
            "stability_ratio": stability,
            "method": self.method,
        }


def _set_volume(e: SetLike, method: str, cells: int, resolution: int,
                padding: float) -> Tuple[float, float]:
    """|E| and the change when the resolution is halved."""
    if isinstance(e, VoxelSet):
        return volume(e), 0.0
    if method == "boundary":
        found = []
        for points in (resolution, max(8, resolution // 2)):
            mesh = boundary_mesh(e, points)
            found.append(float(np.sum(mesh.weights * np.einsum("ij,ij->i", mesh.points, mesh.normals))) / e.dim)
        return found[0], abs(found[0] - found[1])
    box = e.bounds()
    found = [voxelize(e, grid_around(box[0], box[1], c, padding)).volume_in_box
             for c in (cells, max(2, cells // 2))]
    return found[0], abs(found[0] - found[1])


def _ratio_parts(per: InteractionEstimate, vol: float, vol_error: float, k: KernelParams) -> Tuple[float, float]:
    """Per_s / |E|^((n-s)/n) and its relative error."""
    exponent = (k.n - k.s) / k.n
    return per.value / vol ** exponent, per.error_bound / per.value + exponent * vol_error / vol


@lru_cache(maxsize=32)
def _ball_ratio(n: int, s: float, method: str, cells: int, resolution: int, padding: float,
                opts: QuadratureOptions) -> Tuple[float, float]:
    ball = Ball(tuple([0.0] * n), 1.0)
    k = KernelParams(n, s)
    per = per_s_global(ball, k, opts, method=method, cells=cells, resolution=resolution, padding=padding)
    vol, vol_error = _set_volume(ball, method, cells, resolution, padding)
    return _ratio_parts(per, vol, vol_error, k)


def _voxel_ball_ratio(vs: VoxelSet, k: KernelParams, opts: QuadratureOptions) -> Tuple[float, float]:
    """Ball of the same volume voxelized with the cell size of `vs`."""
    n = vs.grid.n
    radius = (vs.volume_in_box / UNIT_BALL_VOLUME[n]) ** (1.0 / n)
    h = float(vs.grid.h.max())
    half = (math.ceil(radius / h) + 2) * h
    grid = GridSpec(tuple([-half] * n), tuple([half] * n), tuple([int(round(2 * half / h))] * n))
    ball = voxelize(Ball(tuple([0.0] * n), radius), grid)
    return _ratio_parts(per_s_global(ball, k, opts), ball.volume_in_box, 0.0, k)


def isoperimetric_report(e: SetLike, k: KernelParams, opts: Optional[QuadratureOptions] = None,
                         method: str = "auto", cells: int = 64, resolution: int = 1024,
                         asymmetry_cells: int = 128, padding: float = 0.25) -> IsoperimetricReport:
    """
    Scale-invariant ratio, deficit against the ball at matched resolution, and asymmetry.

    On the grid the reference ball gets the cell size of E; voxel sets are
    compared with a ball voxelized on their own cell size.
    """
    opts = opts or QuadratureOptions()
    chosen = "grid" if isinstance(e, VoxelSet) else resolve_method(e, method)
    per = per_s_global(e, k, opts, method=chosen, cells=cells, resolution=resolution, padding=padding)
    vol, vol_error = _set_volume(e, chosen, cells, resolution, padding)
    if vol <= 0:
        raise ValidationError("shape", "set has zero volume")
    ratio, rel = _ratio_parts(per, vol, vol_error, k)
    if isinstance(e, VoxelSet):
        ball_ratio, ball_rel = _voxel_ball_ratio(e, k, opts)
    elif chosen == "grid":
        box = e.bounds()
        h = float(np.max(box[1] - box[0])) / cells
        ball_cells = max(2, int(round(2.0 / h)))
        ball_ratio, ball_rel = _ball_ratio(k.n, k.s, chosen, ball_cells, resolution, padding, opts)
    else:
        ball_ratio, ball_rel = _ball_ratio(k.n, k.s, chosen, cells, resolution, padding, opts)
    deficit = ratio / ball_ratio - 1.0
    deficit_error = (rel + ball_rel) * (1.0 + abs(deficit))
    asym, center, asym_tol = fraenkel_asymmetry_estimate(e, asymmetry_cells, padding)
    logger.info(f"[GEOMETRY] isoperimetric deficit {deficit:.5g} +/- {deficit_error:.2g}, asymmetry {asym:.4g}")
    return IsoperimetricReport(per, vol, vol_error, ratio, ratio * rel, ball_ratio, ball_ratio * ball_rel,
                               deficit, deficit_error, asym, asym_tol, tuple(float(c) for c in center), chosen)


# ==================== SECOND VARIATION ====================

def _check_closed(mesh: BoundaryMesh) -> None:
    spacing = mesh.spacing
    for comp in np.unique(mesh.component):
        sel = mesh.component == comp
        drift = np.linalg.norm(mesh.weights[sel] @ mesh.normals[sel])
        if drift > 1e-2 * mesh.weights[sel].sum():
            raise MeshError("mesh", f"component {comp} is not a closed boundary")
        if mesh.dim == 2:
            pts = mesh.points[sel]
            gaps = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
            if gaps.max() > 3.0 * np.median(gaps):
                raise MeshError("mesh", f"component {comp} has a gap")
    x = mesh.points
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, np.inf)
    if dist.min() < 0.05 * spacing:
        raise MeshError("mesh", "coincident points: boundary intersects itself")


@dataclass(frozen=True, eq=False)
class SecondVariationForm:
    """
    Q(f) = normalization * (J(f) - weight_coefficient * sum_i w_i f_i^2 c2_i),
    with J the Dirichlet-type double sum. The weight coefficient makes
    translations neutral on the round ball at the same resolution.
    """

    mesh: BoundaryMesh
    kernel: KernelParams
    kernel_matrix: np.ndarray
    c2: np.ndarray
    weight_coefficient: float
    normalization: float
    calibrated: bool
    skipped_pairs: int

    def jacobi_part(self, f) -> float:
        f = np.asarray(f, dtype=float)
        w = self.mesh.weights
        diff = f[:, None] - f[None, :]
        return 0.5 * float(np.sum(w[:, None] * w[None, :] * diff * diff * self.kernel_matrix))

    def weight_part(self, f) -> float:
        f = np.asarray(f, dtype=float)
        return float(np.sum(self.mesh.weights * f * f * self.c2))

    def __call__(self, f) -> float:
        return self.normalization * (self.jacobi_part(f) - self.weight_coefficient * self.weight_part(f))

    def norm_squared(self, f) -> float:
        f = np.asarray(f, dtype=float)
        return float(np.sum(self.mesh.weights * f * f))

    def to_json(self) -> Dict:
        return {
            "points": len(self.mesh),
            "weight_coefficient": self.weight_coefficient,
            "normalization": self.normalization,
            "label": "calibrated" if self.calibrated else "uncalibrated",
            "skipped_pairs": self.skipped_pairs,
        }


def _kernel_parts(mesh: BoundaryMesh, s: float) -> Tuple[np.ndarray, np.ndarray, int]:
    n = mesh.dim
    x, nu, w = mesh.points, mesh.normals, mesh.weights
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    keep = dist >= 0.5 * mesh.spacing
    np.fill_diagonal(keep, False)
    kern = np.where(keep, np.maximum(dist, 1e-300) ** (-(n + s)), 0.0)
    skipped = int((~keep).sum() - len(mesh)) // 2
    ndiff = nu[:, None, :] - nu[None, :, :]
    c2 = (kern * np.einsum("ijk,ijk->ij", ndiff, ndiff)) @ w
    return kern, c2, skipped


def _raw_parts(mesh: BoundaryMesh, s: float, f: np.ndarray) -> Tuple[float, float]:
    kern, c2, _ = _kernel_parts(mesh, s)
    w = mesh.weights
    diff = f[:, None] - f[None, :]
    jac = 0.5 * float(np.sum(w[:, None] * w[None, :] * diff * diff * kern))
    return jac, float(np.sum(w * f * f * c2))


@lru_cache(maxsize=32)
def _translation_coefficient(n: int, s: float, points: int) -> float:
    unit = boundary_mesh(Ball(tuple([0.0] * n), 1.0), points)
    jac, weight = _raw_parts(unit, s, unit.normals[:, 0].copy())
    return jac / weight


@lru_cache(maxsize=32)
def _fd_normalization(s: float, points: int, coefficient: float,
                      amplitude: float = 0.02, fd_points: int = 1440) -> Optional[float]:
    """Scale matching Q(cos 2phi) to d^2/dt^2 Per_s of r = 1 + t cos 2phi."""
    k = KernelParams(2, s)
    per = [per_s_global(RadialGraph((0.0, 0.0), 1.0, ((2, t, 0.0),)), k, method="boundary",
                        resolution=fd_points).value for t in (-amplitude, 0.0, amplitude)]
    second = (per[0] - 2.0 * per[1] + per[2]) / amplitude ** 2
    unit = boundary_mesh(Ball((0.0, 0.0), 1.0), points)
    phi = np.arctan2(unit.points[:, 1], unit.points[:, 0])
    jac, weight = _raw_parts(unit, s, np.cos(2.0 * phi))
    denom = jac - coefficient * weight
    if denom <= 0:
        return None
    return second / denom


def second_variation_form(mesh: BoundaryMesh, k: KernelParams, calibrate: bool = True) -> SecondVariationForm:
    """Assemble the kernel matrix, the normal weights c2 and the calibration constants."""
    if mesh.dim != k.n or k.n == 1:
        raise ValidationError("kernel.n", "second variation needs a 2D or 3D mesh of matching dimension")
    _check_closed(mesh)
    kern, c2, skipped = _kernel_parts(mesh, k.s)
    coefficient = _translation_coefficient(k.n, k.s, len(mesh))
    normalization, calibrated = k.normalization, False
    if calibrate and k.n == 2:
        scale = _fd_normalization(k.s, len(mesh), coefficient)
        if scale is None:
            logger.warning("[GEOMETRY] cos(2 phi) mode not positive at this resolution; "
                           "keeping s(1-s) normalization")
        else:
            normalization, calibrated = scale, True
    if skipped:
        logger.info(f"[GEOMETRY] second variation skipped {skipped} close point pairs")
    return SecondVariationForm(mesh, k, kern, c2, coefficient, normalization, calibrated, skipped)
