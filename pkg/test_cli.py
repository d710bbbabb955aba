"""
Command-Line Tests
Config resolution, exit codes and the files each run leaves behind.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.main import main, resolve_config


HALF_PLANE = {"type": "halfspace", "normal": [0.0, 1.0]}
UNIT_DISK = {"type": "ball", "center": [0.0, 0.0], "radius": 1.0}


def run(document, *extra):
    """Write the document to a temp dir, run the CLI there and return (code, out dir)."""
    tmp = Path(tempfile.mkdtemp())
    path = tmp / "experiment.json"
    path.write_text(json.dumps(document))
    out = tmp / "results"
    code = main(['--config', str(path), '--out', str(out), '--log-level', 'WARNING', *extra])
    return code, out


def test_document_overrides_preset():
    resolved = resolve_config({"command": "zeta", "kernel": {"s": 0.3}}, "fast")
    assert resolved['kernel']['s'] == 0.3
    assert resolved['preset'] == "fast"
    assert resolved['command'] == "zeta"
    assert 'plateau' in resolved and 'quadrature' in resolved


def test_unknown_section_is_invalid_input():
    code, _ = run({"command": "zeta", "shape": HALF_PLANE, "kernal": {"s": 0.5}})
    assert code == 2


def test_missing_kernel_s_is_invalid_input():
    code, out = run({"command": "curvature", "shape": UNIT_DISK, "point": [1.0, 0.0]})
    assert code == 2
    assert not out.exists()


def test_kernel_dimension_mismatch():
    code, _ = run({"command": "curvature", "shape": UNIT_DISK, "point": [1.0, 0.0],
                   "kernel": {"n": 3, "s": 0.5}})
    assert code == 2


def test_unknown_command_and_missing_file():
    code, _ = run({"command": "area", "shape": UNIT_DISK})
    assert code == 2
    assert main(['--config', '/nonexistent/experiment.json', '--log-level', 'WARNING']) == 2


def test_zeta_run_writes_report_and_table():
    code, out = run({"command": "zeta", "shape": HALF_PLANE,
                     "zeta": {"s_list": [0.1, 0.05, 0.025]}})
    assert code == 0
    report = json.loads((out / "zeta_report.json").read_text())
    assert set(report) == {"command", "config", "timestamp", "results"}
    assert report['command'] == "zeta"
    assert report['results']['extrapolated']['value'] == 0.5
    assert report['results']['exact'] is True
    rows = (out / "zeta_sweep.csv").read_text().splitlines()
    assert rows[0] == "s,value,error_bound"
    assert len(rows) == 4


def test_command_argument_wins_over_document():
    code, out = run({"command": "curvature", "shape": {"type": "box", "lo": [0.0], "hi": [1.0]},
                     "kernel": {"s": 0.5}}, "perimeter-global")
    assert code == 0
    report = json.loads((out / "perimeter_global_report.json").read_text())
    assert abs(report['results']['perimeter']['value'] - 2.0) < 1e-9


def test_plateau_run_saves_labels():
    code, out = run({
        "command": "plateau",
        "omega": {"type": "box", "lo": [-0.5, -0.5], "hi": [0.5, 0.5]},
        "exterior": {"type": "halfspace", "normal": [0.0, -1.0]},
        "kernel": {"s": 0.5},
        "plateau": {"cells": 4, "margin": 2},
    }, "--debug-checks")
    assert code == 0
    assert (out / "plateau_report.json").exists()
    assert (out / "plateau_solution.json").exists()
    assert (out / "plateau_solution_labels.json").exists()
    report = json.loads((out / "plateau_report.json").read_text())
    assert report['results']['problem']['free_cells'] == 16


def test_curvature_point_report_carries_errors():
    code, out = run({"command": "curvature", "shape": UNIT_DISK, "point": [1.0, 0.0],
                     "kernel": {"s": 0.5}})
    assert code == 0
    results = json.loads((out / "curvature_report.json").read_text())['results']
    assert set(results) == {"curvature", "normal", "classical_curvature", "pv_radius", "point"}
    assert set(results['classical_curvature']) == {"value", "error_bound"}
    assert set(results['pv_radius']) == {"value", "tolerance"}


def test_reports_reproduce_apart_from_timestamp():
    documents = [
        {"command": "curvature", "shape": UNIT_DISK, "point": [1.0, 0.0], "kernel": {"s": 0.5}},
        {"command": "plateau", "omega": {"type": "box", "lo": [-0.5, -0.5], "hi": [0.5, 0.5]},
         "exterior": {"type": "halfspace", "normal": [0.0, -1.0]}, "kernel": {"s": 0.5},
         "plateau": {"cells": 6, "margin": 2}},
    ]
    for document in documents:
        texts = []
        for _ in range(2):
            code, out = run(document)
            assert code == 0
            stem = document['command']
            lines = (out / f"{stem}_report.json").read_text().splitlines()
            texts.append([line for line in lines if '"timestamp"' not in line])
        assert texts[0] == texts[1]


def main_tests():
    """Run all tests"""
    print("\n" + "="*60)
    print("Command-Line Tests")
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
    sys.exit(main_tests())
