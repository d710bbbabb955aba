"""
Configuration file for the Nonlocal Geometry Toolkit
Edit this file to change the defaults every experiment starts from.
Experiment documents (experiments/*.json) override these per run.
"""

# ==================== KERNEL ====================
KERNEL = {
    'n': None,                  # Ambient dimension (1, 2 or 3); None = taken from the shapes
    's': None,                  # Fractional order in (0, 1); required by single-s commands
    's_list': None,             # Sweep list; required by s1-check and curvature-sweep
}

# ==================== QUADRATURE ====================
QUADRATURE = {
    'near_field_rel_tol': 1e-6,  # Stop the Gauss-Legendre ladder at this relative change
    'far_cutoff': None,          # Ray truncation radius; None = far_cutoff_factor * diameter
    'far_cutoff_factor': 8.0,    # Multiple of the set diameter (> 1)
    'max_subdivision_depth': 12, # Box splitting levels before QuadratureError
    'angular_nodes': 256,        # Directions per ray fan (2D); ~ count in 3D
    'radial_nodes': 32,          # Samples per ray before crossing bisection
    'bisection_steps': 40,       # Crossing refinement per flip
    'exterior_gauss': 2,         # Gauss points per axis for cell-averaged potentials
}

# ==================== GRID ====================
GRID = {
    'cells': 64,                # Cells along the longest side of the bounding box
    'padding': 0.25,            # Extra margin as a fraction of the box (grid_around)
    'subsamples': 4,            # Occupancy subsamples per axis when voxelizing
    'resolution': 1024,         # Boundary mesh points for the boundary method
    'method': 'auto',           # per_s_global: 'auto', 'grid' or 'boundary'
}

# ==================== CURVATURE ====================
CURVATURE = {
    'pv_radius': None,          # Excluded ball radius; None = 2 * mesh spacing
    'mesh_points': 180,         # Boundary points for the profile
    'local_correction': False,  # Fill the excluded ball from the local curvature
}

# ==================== ZETA (MASS AT INFINITY) ====================
ZETA = {
    's_list': [0.1, 0.05, 0.025],  # Strictly descending, at least 3 values
    'residual_tol': 1e-2,          # Fit residual above this flags "limit may not exist"
    'prediction_cells': 128,       # Grid for the s -> 0 volume prediction
}

# ==================== SECOND VARIATION ====================
SECOND_VARIATION = {
    'mesh_points': 256,         # Boundary points on the tested shape
    'calibrate': True,          # Translation-neutral coefficient + finite-difference scale
    'field': 'cos2',            # 'cos2', 'translation' or 'constant'
}

# ==================== PLATEAU (MIN-CUT) ====================
PLATEAU = {
    'cells': 48,                # Cells across the domain box
    'margin': 8,                # Fixed ring of cells around the domain
    'pair_cutoff': None,        # Pair distance kept in the graph; None = half the domain diameter
    'volume_rel_tol': 0.02,     # Fixed volume: accept |V - target| <= tol * target + h^n
    'mu_tol': 1e-6,             # Bisection stops when the mu bracket is this narrow
    'mu_bisection_steps': 60,
    'proximal_max_steps': 40,
    'memory_fraction': 0.5,     # Share of available RAM the graph may take
    'seed': 0,                  # Random labelings for the debug identity check
}

# ==================== OUTPUT ====================
OUTPUT = {
    'directory': 'results',     # Reports and CSV files go here (--out overrides)
    'write_csv': True,          # Sweeps and profiles also emit CSV
    'indent': 2,                # JSON indentation
}

# ==================== LOGGING ====================
LOGGING = {
    'level': 'INFO',            # DEBUG, INFO, WARNING, ERROR
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
}

# ==================== PERFORMANCE ====================
PERFORMANCE = {
    'threads': 1,               # Worker threads for ray batches and profiles (0 = physical cores)
    'debug_checks': False,      # Verify the cut/energy identity while assembling graphs
}

SECTIONS = ('KERNEL', 'QUADRATURE', 'GRID', 'CURVATURE', 'ZETA', 'SECOND_VARIATION',
            'PLATEAU', 'OUTPUT', 'LOGGING', 'PERFORMANCE')

# ==================== QUICK PRESETS ====================

def get_preset(preset_name):
    """
    Get a predefined configuration preset
    Usage: overrides = get_preset('fast')
    """
    presets = {
        'default': {},
        'fast': {  # Coarse grids - minutes become seconds, error bounds grow
            'QUADRATURE': {'near_field_rel_tol': 1e-4, 'angular_nodes': 128, 'radial_nodes': 16},
            'GRID': {'cells': 32, 'subsamples': 2, 'resolution': 256},
            'CURVATURE': {'mesh_points': 60},
            'SECOND_VARIATION': {'mesh_points': 128},
            'PLATEAU': {'cells': 24, 'margin': 4},
        },
        'accurate': {  # Fine grids - slower, tighter bounds
            'QUADRATURE': {'near_field_rel_tol': 1e-8, 'angular_nodes': 512, 'radial_nodes': 64},
            'GRID': {'cells': 128, 'subsamples': 6, 'resolution': 2048},
            'CURVATURE': {'mesh_points': 360},
            'SECOND_VARIATION': {'mesh_points': 512},
            'PLATEAU': {'cells': 64, 'margin': 12},
        },
    }
    return presets.get(preset_name, presets['default'])


if __name__ == '__main__':
    # Example: Print current configuration
    print("Current Configuration:")
    print(f"Kernel: n={KERNEL['n'] or 'from shapes'}")
    print(f"Grid: {GRID['cells']} cells, method {GRID['method']}")
    print(f"Plateau: {PLATEAU['cells']} cells + {PLATEAU['margin']} margin")
    print()
    print("Available presets: default, fast, accurate")
    print("Example: overrides = get_preset('fast')")
