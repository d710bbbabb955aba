"""
Module Testing Script
Check the environment and exercise each module once to debug issues
"""

import sys
import math
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))


def test_dependencies():
    """Test all dependencies"""
    print("\n" + "="*60)
    print("Testing Dependencies")
    print("="*60)

    dependencies = [
        'numpy',
        'scipy',
        'skimage',
        'maxflow',
        'yaml',
        'psutil',
    ]

    missing = []

    for dep in dependencies:
        try:
            __import__(dep)
            print(f"✓ {dep}")
        except ImportError:
            print(f"✗ {dep} (missing)")
            missing.append(dep)

    if missing:
        print(f"\nMissing dependencies: {', '.join(missing)}")
        print("Install with: pip install -r requirements.txt")
        return False

    return True


def test_geometry():
    """Voxelize a disk and compare its volume"""
    print("\n" + "="*60)
    print("Testing Geometry")
    print("="*60)

    try:
        from src.geometry_module import Ball, grid_around, volume, voxelize
        disk = Ball((0.0, 0.0), 1.0)
        grid = grid_around(*disk.bounds(), cells=64)
        vol = volume(voxelize(disk, grid))
        print(f"✓ Disk volume {vol:.5f} (exact {math.pi:.5f})")
        if abs(vol - math.pi) > 1e-2:
            print("✗ Volume is off")
            return False
    except Exception as e:
        print(f"✗ Geometry test failed: {e}")
        return False

    return True


def test_quadrature():
    """Interaction of two adjacent unit intervals"""
    print("\n" + "="*60)
    print("Testing Quadrature")
    print("="*60)

    try:
        from src.geometry_module import Box
        from src.quadrature_module import KernelParams, interaction
        k = KernelParams(1, 0.5)
        est = interaction(Box((0.0,), (1.0,)), Box((1.0,), (2.0,)), k, cells=8)
        exact = 2.0 - 2.0 ** 0.5
        print(f"✓ I_s = {est.value:.8f} +/- {est.error_bound:.1e} (exact {exact:.8f})")
        if abs(est.value - exact) > 1e-4:
            print("✗ Interaction is off")
            return False
    except Exception as e:
        print(f"✗ Quadrature test failed: {e}")
        return False

    return True


def test_functionals():
    """Perimeter of the unit interval"""
    print("\n" + "="*60)
    print("Testing Functionals")
    print("="*60)

    try:
        from src.geometry_module import Box
        from src.functionals_module import per_s_global
        from src.quadrature_module import KernelParams
        est = per_s_global(Box((0.0,), (1.0,)), KernelParams(1, 0.5))
        print(f"✓ Per_s((0,1)) = {est.value:.6f} (exact 2)")
        if abs(est.value - 2.0) > 2e-3:
            print("✗ Perimeter is off")
            return False
    except Exception as e:
        print(f"✗ Functionals test failed: {e}")
        return False

    return True


def test_plateau():
    """Tiny min-cut problem"""
    print("\n" + "="*60)
    print("Testing Plateau Solver")
    print("="*60)

    try:
        from src.geometry_module import Box, HalfSpace
        from src.plateau_module import PlateauProblem, solve_plateau
        from src.quadrature_module import KernelParams
        problem = PlateauProblem.around(Box((-0.5, -0.5), (0.5, 0.5)), HalfSpace((0.0, -1.0)),
                                        KernelParams(2, 0.5), cells=8, margin=2)
        solution = solve_plateau(problem)
        print(f"✓ Energy {solution.energy:.6f}, flatness {solution.flatness} cells, "
              f"{solution.edge_count} edges")
        labels = solution.labels[problem.free]
        if not np.any(labels) or np.all(labels):
            print("✗ Expected a non-trivial interface")
            return False
    except Exception as e:
        print(f"✗ Plateau test failed: {e}")
        return False

    return True


def main():
    """Run all tests"""
    print("\n")
    print("╔" + "="*58 + "╗")
    print("║" + " "*58 + "║")
    print("║" + "  Nonlocal Geometry Toolkit - Module Test Suite".center(58) + "║")
    print("║" + " "*58 + "║")
    print("╚" + "="*58 + "╝")

    tests = [
        ("Dependencies", test_dependencies),
        ("Geometry", test_geometry),
        ("Quadrature", test_quadrature),
        ("Functionals", test_functionals),
        ("Plateau Solver", test_plateau),
    ]

    results = {}

    for test_name, test_func in tests:
        try:
            results[test_name] = test_func()
        except Exception as e:
            print(f"✗ Unexpected error in {test_name}: {e}")
            results[test_name] = False

    # Summary
    print("\n" + "="*60)
    print("TEST SUMMARY")
    print("="*60)

    passed = sum(1 for v in results.values() if v)
    total = len(results)

    for test_name, result in results.items():
        status = "✓ PASS" if result else "✗ FAIL"
        print(f"{status}: {test_name}")

    print(f"\nTotal: {passed}/{total} tests passed")

    if passed == total:
        print("\n✓ All tests passed! Your system is ready.")
        print("\nRun an experiment with: python src/main.py --config experiments/zeta_halfspace.json")
        return 0
    else:
        print(f"\n✗ {total - passed} test(s) failed. Please fix the issues above.")
        print("\nCommon fixes:")
        print("  1. Reinstall dependencies: pip install -r requirements.txt")
        print("  2. PyMaxflow needs a C++ compiler when no wheel matches your Python")
        print("  3. Update pip: python -m pip install --upgrade pip")
        return 1


if __name__ == "__main__":
    sys.exit(main())
