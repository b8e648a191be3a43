"""Slow-fast conservative dynamics on level surfaces in R^3.

A numerical laboratory for systems driven by the cross product of two
gradients: fast rotation along the intersection curves {F=z, G=g}, slow
drift across them from a weak damping perturbation, optional small
Stratonovich noise tangent to {F=z}.  The package computes the geometry of
the level-curve foliation, the averaged drift/diffusion coefficients on the
quotient graph, branching and gluing laws at saddle vertices, metastable
time-scale thresholds, and the analogous objects for genus-one surfaces
with an ergodic winding region.  A Monte Carlo harness ties the full 3-D
dynamics to these reduced descriptions.
"""

from .fields import (
    SmoothField, VectorField, NoiseMap, SurfaceSystem,
    smooth_field, gradient_field, explicit_field,
    tangent_projection_noise, constant_noise,
    fast_field, damping_field, slow_drift, ito_correction, divergence_check,
    canonical_sphere_system, cap_system,
)
from .integrate import (
    IntegratorConfig, Trajectory,
    integrate_unperturbed, integrate_slow, integrate_sde,
    sample_uniform_neighborhood,
)
from .levelsets import (
    CriticalPoint, LevelCurve, ReebGraph,
    find_critical_points, trace_level_curve, line_functional,
    classify_point, build_reeb_graph,
)
from .averaging import (
    EdgeTable, CoefficientSet, SaddleData, MetastableReport,
    drift_coefficient, noise_coefficients, gluing_weights,
    branching_probabilities, solve_slow_ode, metastable_thresholds,
    coefficient_set,
)
from .graphproc import (
    GraphState, GraphPath,
    simulate_limit_process, simulate_graph_diffusion, transition_time_stats,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
