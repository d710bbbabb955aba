"""
FAST MODE - every archived experiment on coarse grids
Quick end-to-end check of the whole toolkit
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.main import main as run_experiment


def main():
    """
    Run each document in experiments/ with the 'fast' preset.
    """
    print("=" * 60)
    print("Nonlocal Geometry Toolkit - FAST MODE")
    print("=" * 60)
    print()

    experiments = sorted((Path(__file__).parent / 'experiments').glob('*.json'))
    out_root = Path(__file__).parent / 'results' / 'fast'

    print("[INFO] FAST MODE Configuration:")
    print("  - Preset: fast (coarse grids, fewer angular nodes)")
    print(f"  - Experiments: {len(experiments)}")
    print(f"  - Output: {out_root}")
    print()

    failures = []
    try:
        for path in experiments:
            start = time.time()
            code = run_experiment(['--config', str(path), '--preset', 'fast',
                                   '--out', str(out_root / path.stem), '--log-level', 'WARNING'])
            status = "✓" if code == 0 else f"✗ (exit {code})"
            print(f"{status} {path.stem} [{time.time() - start:.1f}s]")
            if code != 0:
                failures.append(path.stem)
    except KeyboardInterrupt:
        print("\n[INFO] Interrupted by user")
        return 130

    print()
    if failures:
        print(f"[ERROR] {len(failures)} experiment(s) failed: {', '.join(failures)}")
        return 1
    print("[INFO] All experiments finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())
