"""Diffusions on embedded manifolds, the geometry their coefficients
induce, and paired Monte Carlo verification of the derivative and
filtering identities that geometry satisfies.

The package splits into layers: `geometry` (manifolds, fields, probes),
`connection` (the image subbundle, its connection, curvature), `noise`
(driving increments, shift directions, reweighting), `flow` (the
simulation engine, derivative and filtered flows, perturbations),
`harness` (paired estimators), `scenarios` (built-in systems with
validated closed forms), and `report`/`cli` (check drivers).
"""
from .connection import (ConnectionOracle, DiffusionSystem, SubbundlePoint,
                         adjoint_Y, constant_rank_check, curvature,
                         image_subbundle, injectivity_defect,
                         ljw_derivative, ricci_sharp)
from .errors import (GridError, LjwError, NotFoundError, OffManifoldError,
                     PreconditionError, RankDegeneracyError, SectionError,
                     StepSizeError, UnsupportedOperationError,
                     UnsupportedScenarioError, UsageError)
from .flow import (FieldPack, FilteredFlow, FlowPath,
                   antidevelopment_martingale_increments, compose_check,
                   filtered_derivative_flow, generic_pack, girsanov_weight,
                   integrate_flow, perturbation_ode, shifted_flow,
                   simulate_batch)
from .geometry import (EmbeddedManifold, VectorField, circle,
                       constant_field, flat_torus, halton_points,
                       levi_civita_transport, unit_sphere)
from .harness import (CylindricalFunctional, EstimatorResult,
                      conditional_flow_check, estimate_eq4,
                      estimate_eq5_multipoint, estimate_eq9,
                      girsanov_reweight_check, tau_derivative_check)
from .noise import (CameronMartinPath, DrivingNoise, linear_direction,
                    sample_noise, time_grid)
from .report import RunConfig, run_check
from .scenarios import (Scenario, build_system, get_scenario,
                        list_scenarios, make_functional, scenario_ids)
from .version import __version__

__all__ = [
    "__version__",
    "CameronMartinPath", "ConnectionOracle", "CylindricalFunctional",
    "DiffusionSystem", "DrivingNoise", "EmbeddedManifold",
    "EstimatorResult", "FieldPack", "FilteredFlow", "FlowPath",
    "GridError", "LjwError", "NotFoundError", "OffManifoldError",
    "PreconditionError", "RankDegeneracyError", "RunConfig", "Scenario",
    "SectionError", "StepSizeError", "SubbundlePoint",
    "UnsupportedOperationError", "UnsupportedScenarioError", "UsageError",
    "VectorField",
    "adjoint_Y", "antidevelopment_martingale_increments", "build_system",
    "circle", "compose_check", "conditional_flow_check",
    "constant_field", "constant_rank_check", "curvature", "estimate_eq4",
    "estimate_eq5_multipoint", "estimate_eq9", "filtered_derivative_flow",
    "flat_torus", "generic_pack", "get_scenario", "girsanov_reweight_check",
    "girsanov_weight", "halton_points", "image_subbundle",
    "injectivity_defect", "integrate_flow", "levi_civita_transport",
    "linear_direction", "list_scenarios", "ljw_derivative",
    "make_functional", "perturbation_ode", "ricci_sharp", "run_check",
    "sample_noise", "scenario_ids", "shifted_flow", "simulate_batch",
    "tau_derivative_check", "time_grid", "unit_sphere",
]
