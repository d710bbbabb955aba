"""
Main Application
Command-line entry point: one experiment document in, a JSON report (and
CSV tables for sweeps and profiles) out.

Usage:
    python src/main.py zeta --config experiments/zeta_halfspace.json --out results
"""

import argparse
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import config as settings  # noqa: E402
from src.errors import DimensionMismatchError, ValidationError, exit_code_for  # noqa: E402
from src.functionals_module import (  # noqa: E402
    SweepPoint,
    curvature_estimate,
    curvature_profile,
    curvature_s_sweep,
    isoperimetric_report,
    per_s_global,
    per_s_local,
    perimeter_sweep,
    s0_check,
    s1_check,
    second_variation_form,
    zeta_estimate,
)
from src.geometry_module import ShapeExpr, boundary_mesh, shape_from_json  # noqa: E402
from src.plateau_module import (  # noqa: E402
    PlateauOptions,
    PlateauProblem,
    save_solution,
    solve_fixed_volume,
    solve_plateau,
)
from src.quadrature_module import KernelParams, QuadratureOptions, set_worker_count  # noqa: E402

logger = logging.getLogger(__name__)

COMMANDS = ('perimeter', 'perimeter-global', 'zeta', 's0-check', 's1-check', 'curvature',
            'curvature-sweep', 'isoperimetry', 'second-variation', 'plateau', 'plateau-volume')

# Top-level keys that are not config sections
DOCUMENT_KEYS = ('command', 'name', 'shape', 'omega', 'exterior', 'point', 'target_volume', 'seed')


def default_config() -> Dict[str, Any]:
    """config.py sections as a lower-case nested dict."""
    return {name.lower(): copy.deepcopy(getattr(settings, name)) for name in settings.SECTIONS}


def _merge(base: Dict, overrides: Dict) -> Dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def resolve_config(document: Dict, preset: str = 'default') -> Dict[str, Any]:
    """config.py defaults, then the preset, then the experiment document."""
    if not isinstance(document, dict):
        raise ValidationError("config", "experiment document must be a mapping")
    resolved = default_config()
    preset_overrides = {name.lower(): section for name, section in settings.get_preset(preset).items()}
    _merge(resolved, preset_overrides)
    for key, value in document.items():
        if key in DOCUMENT_KEYS:
            resolved[key] = copy.deepcopy(value)
        elif key in resolved and isinstance(value, dict):
            _merge(resolved[key], value)
        else:
            raise ValidationError(key, "unknown config section")
    resolved['preset'] = preset
    return resolved


def load_document(path) -> Dict:
    """JSON or YAML experiment document (JSON is valid YAML)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError("config", f"{path} does not exist")
    with open(path) as f:
        try:
            document = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValidationError("config", f"cannot parse {path}: {e}") from e
    return document or {}


def _to_builtin(value):
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    return value


class ExperimentRunner:
    """
    Validates a resolved config for its command and runs it.

    Every command returns a JSON-ready results dict; sweeps and profiles
    also fill `tables` with CSV rows.
    """

    def __init__(self, config: Dict[str, Any], out_dir, debug_checks: bool = False):
        self.config = config
        self.out_dir = Path(out_dir)
        self.debug_checks = debug_checks or bool(config['performance'].get('debug_checks'))
        self.tables: Dict[str, List[List[Any]]] = {}
        self.artifacts: List[Path] = []
        command = config.get('command')
        if command not in COMMANDS:
            raise ValidationError("command", f"{command!r} is not one of {', '.join(COMMANDS)}")
        self.command = command
        self.quadrature = QuadratureOptions.from_config(config['quadrature'])

    # ---------- validation helpers ----------

    def _shape(self, key: str) -> ShapeExpr:
        doc = self.config.get(key)
        if doc is None:
            raise ValidationError(key, f"required by '{self.command}'")
        return shape_from_json(doc, key)

    def _dimension(self, *shapes: ShapeExpr) -> int:
        n = shapes[0].dim
        declared = self.config['kernel'].get('n')
        if any(shape.dim != n for shape in shapes):
            raise DimensionMismatchError("shape", "shapes have different dimensions")
        if declared is not None and declared != n:
            raise DimensionMismatchError("kernel.n", f"kernel n={declared} but shapes have n={n}")
        return n

    def _kernel(self, n: int) -> KernelParams:
        s = self.config['kernel'].get('s')
        if s is None:
            raise ValidationError("kernel.s", f"required by '{self.command}'")
        if not isinstance(s, (int, float)):
            raise ValidationError("kernel.s", "must be a number")
        return KernelParams(n, s)

    def _s_list(self, section: str = 'kernel') -> List[float]:
        values = self.config[section].get('s_list')
        if not values:
            raise ValidationError(f"{section}.s_list", f"required by '{self.command}'")
        if not all(isinstance(v, (int, float)) for v in values):
            raise ValidationError(f"{section}.s_list", "must be a list of numbers")
        return [float(v) for v in values]

    def _point(self, n: int) -> Optional[np.ndarray]:
        point = self.config.get('point')
        if point is None:
            return None
        point = np.asarray(point, dtype=float)
        if point.shape != (n,):
            raise DimensionMismatchError("point", f"expected {n} coordinates")
        return point

    def _sweep_table(self, points: Sequence[SweepPoint]):
        self.tables['sweep'] = [['s', 'value', 'error_bound']] + [[p.s, p.value, p.error_bound] for p in points]

    # ---------- commands ----------

    def run(self) -> Dict[str, Any]:
        logger.info(f"[CLI] running '{self.command}'")
        handler = getattr(self, '_cmd_' + self.command.replace('-', '_'))
        return _to_builtin(handler())

    def _cmd_perimeter(self):
        e, omega = self._shape('shape'), self._shape('omega')
        n = self._dimension(e, omega)
        grid = self.config['grid']
        if self.config['kernel'].get('s_list'):
            points = perimeter_sweep(e, omega, self._s_list(), n, self.quadrature, grid['cells'],
                                     padding=grid['padding'])
            self._sweep_table(points)
            return {"sweep": [p.__dict__ for p in points]}
        report = per_s_local(e, omega, self._kernel(n), self.quadrature, grid['cells'], grid['subsamples'],
                             grid['padding'])
        return report.to_json()

    def _cmd_perimeter_global(self):
        e = self._shape('shape')
        n = self._dimension(e)
        grid = self.config['grid']
        if self.config['kernel'].get('s_list'):
            points = perimeter_sweep(e, None, self._s_list(), n, self.quadrature, grid['cells'], grid['method'],
                                     grid['padding'])
            self._sweep_table(points)
            return {"sweep": [p.__dict__ for p in points]}
        k = self._kernel(n)
        estimate = per_s_global(e, k, self.quadrature, grid['method'], grid['cells'], grid['resolution'],
                                grid['padding'])
        return {"perimeter": estimate.to_json(), "kernel": k.to_json(), "method": grid['method']}

    def _cmd_zeta(self):
        e = self._shape('shape')
        self._dimension(e)
        zeta = self.config['zeta']
        estimate = zeta_estimate(e, self._s_list('zeta'), self.quadrature, zeta['residual_tol'])
        self._sweep_table([SweepPoint(s, v, err) for (s, v), err in zip(estimate.samples, estimate.sample_errors)])
        return estimate.to_json()

    def _cmd_s0_check(self):
        e, omega = self._shape('shape'), self._shape('omega')
        self._dimension(e, omega)
        grid = self.config['grid']
        check = s0_check(e, omega, self._s_list('zeta'), self.quadrature, grid['cells'],
                         self.config['zeta']['prediction_cells'], grid['padding'])
        self._sweep_table(check.samples)
        return check.to_json()

    def _cmd_s1_check(self):
        e, omega = self._shape('shape'), self._shape('omega')
        self._dimension(e, omega)
        grid = self.config['grid']
        check = s1_check(e, omega, self._s_list(), self.quadrature, grid['cells'], grid['padding'])
        self._sweep_table(check.samples)
        return check.to_json()

    def _cmd_curvature(self):
        e = self._shape('shape')
        n = self._dimension(e)
        k = self._kernel(n)
        curv = self.config['curvature']
        point = self._point(n)
        if point is not None:
            est = curvature_estimate(e, point, k, self.quadrature, curv['pv_radius'], curv['local_correction'])
            return {**est.to_json(), "point": point.tolist()}
        mesh = boundary_mesh(e, curv['mesh_points'])
        profile = curvature_profile(e, mesh, k, self.quadrature, curv['pv_radius'], curv['local_correction'])
        header = ['point_index'] + [f'x{i}' for i in range(n)] + ['H_s']
        self.tables['profile'] = [header] + [[i] + list(x) + [v] for i, (x, v)
                                             in enumerate(zip(mesh.points.tolist(), profile.values.tolist()))]
        return profile.to_json()

    def _cmd_curvature_sweep(self):
        e = self._shape('shape')
        n = self._dimension(e)
        point = self._point(n)
        if point is None:
            raise ValidationError("point", "required by 'curvature-sweep'")
        sweep = curvature_s_sweep(e, point, self._s_list(), self.quadrature, self.config['curvature']['pv_radius'])
        self._sweep_table(sweep.points)
        return sweep.to_json()

    def _cmd_isoperimetry(self):
        e = self._shape('shape')
        n = self._dimension(e)
        grid = self.config['grid']
        s_values = self._s_list() if self.config['kernel'].get('s_list') else [self._kernel(n).s]
        reports = []
        for s in s_values:
            report = isoperimetric_report(e, KernelParams(n, s), self.quadrature, grid['method'],
                                          grid['cells'], grid['resolution'], padding=grid['padding'])
            reports.append({"s": s, **report.to_json()})
        return {"reports": reports}

    def _cmd_second_variation(self):
        e = self._shape('shape')
        n = self._dimension(e)
        k = self._kernel(n)
        sv = self.config['second_variation']
        mesh = boundary_mesh(e, sv['mesh_points'])
        form = second_variation_form(mesh, k, calibrate=sv['calibrate'])
        centred = mesh.points - mesh.points.mean(axis=0)
        fields = {
            'cos2': np.cos(2.0 * np.arctan2(centred[:, 1], centred[:, 0])),
            'translation': mesh.normals[:, 0],
            'constant': np.ones(len(mesh)),
        }
        if sv['field'] not in fields:
            raise ValidationError("second_variation.field", f"one of {', '.join(fields)}")
        f = fields[sv['field']]
        return {
            "form": form.to_json(),
            "field": sv['field'],
            "Q": {"value": form(f), "tolerance": 1e-3 * form.norm_squared(f)},
            "jacobi_part": {"value": form.jacobi_part(f), "tolerance": 0.0},
            "weight_part": {"value": form.weight_part(f), "tolerance": 0.0},
            "norm_squared": {"value": form.norm_squared(f), "tolerance": 0.0},
        }

    def _plateau_problem(self) -> PlateauProblem:
        omega, datum = self._shape('omega'), self._shape('exterior')
        n = self._dimension(omega, datum)
        plateau = self.config['plateau']
        return PlateauProblem.around(omega, datum, self._kernel(n), plateau['cells'], plateau['margin'],
                                     plateau['pair_cutoff'], self.quadrature, self.config['grid']['subsamples'])

    def _plateau_options(self) -> PlateauOptions:
        section = dict(self.config['plateau'])
        if self.config.get('seed') is not None:
            section['seed'] = self.config['seed']
        section['debug_checks'] = self.debug_checks
        return PlateauOptions.from_config(section)

    def _cmd_plateau(self):
        problem = self._plateau_problem()
        solution = solve_plateau(problem, self._plateau_options())
        self.artifacts.append(save_solution(self.out_dir / 'plateau_solution.json', solution))
        return {"problem": problem.to_json(), "solution": solution.to_json()}

    def _cmd_plateau_volume(self):
        problem = self._plateau_problem()
        target = self.config.get('target_volume')
        if not isinstance(target, (int, float)):
            raise ValidationError("target_volume", "required by 'plateau-volume'")
        solution = solve_fixed_volume(problem, float(target), self.config['plateau']['mu_tol'],
                                      self._plateau_options())
        self.artifacts.append(save_solution(self.out_dir / 'plateau_volume_solution.json', solution))
        return {"problem": problem.to_json(), "solution": solution.to_json()}

    # ---------- output ----------

    def write(self, results: Dict[str, Any]) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        stem = self.command.replace('-', '_')
        report = {
            "command": self.command,
            "config": _to_builtin(self.config),
            "timestamp": time.strftime('%Y-%m-%dT%H:%M:%S'),
            "results": results,
        }
        path = self.out_dir / f"{stem}_report.json"
        with open(path, 'w') as f:
            json.dump(report, f, indent=self.config['output']['indent'], sort_keys=True)
        if self.config['output']['write_csv']:
            for name, rows in self.tables.items():
                with open(self.out_dir / f"{stem}_{name}.csv", 'w', newline='') as f:
                    csv.writer(f).writerows(rows)
        logger.info(f"[CLI] report written to {path}")
        return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Nonlocal geometry toolkit: fractional perimeters, "
                                                 "curvature, mass at infinity and min-cut plateau problems")
    parser.add_argument('command', nargs='?', choices=COMMANDS,
                        help="Command to run (defaults to the document's 'command' field)")
    parser.add_argument('--config', required=True, help="Experiment document (JSON or YAML)")
    parser.add_argument('--out', default=None, help="Output directory (default: OUTPUT['directory'])")
    parser.add_argument('--threads', type=int, default=None, help="Worker threads, 0 = physical cores")
    parser.add_argument('--debug-checks', action='store_true', help="Verify the cut/energy identity")
    parser.add_argument('--preset', default='default', choices=('default', 'fast', 'accurate'))
    parser.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING or ERROR")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one experiment.

    Returns:
        0 on success, 2 on invalid input, 3 on numerical failure, 1 otherwise
    """
    args = build_parser().parse_args(argv)
    level = (args.log_level or settings.LOGGING['level']).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=settings.LOGGING['format'])
    try:
        document = load_document(args.config)
        if args.command is not None:
            document['command'] = args.command
        resolved = resolve_config(document, args.preset)
        threads = args.threads if args.threads is not None else resolved['performance']['threads']
        resolved['performance']['threads'] = set_worker_count(threads)
        out_dir = args.out or resolved['output']['directory']
        runner = ExperimentRunner(resolved, out_dir, debug_checks=args.debug_checks)
        runner.write(runner.run())
        return 0
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            logger.exception(f"[CLI] unexpected failure: {e}")
        else:
            logger.error(f"[CLI] {type(e).__name__}: {e}")
            print(f"[ERROR] {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
