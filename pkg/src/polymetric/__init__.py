"""Directed-polymer endpoint simulation and a coupling metric on layered
subprobability measures."""

__version__ = "0.1.0"

from .errors import ConfigError, NumericContractError, PropertyFailure
from .measures import (
    GridMeasure,
    LayeredMeasure,
    PointMeasure,
    StepDistribution,
    ball_mass,
    convolve,
    heaviest_ball,
    total_mass,
)
from .transport import (
    TransportPlan,
    dual_lower_bound,
    generalized_wasserstein,
    wasserstein,
)
from .metric import (
    MatchPair,
    Matching,
    Triple,
    UpperBoundResult,
    concentration,
    functional_metric,
    metric_exact,
    metric_upper,
    separation,
    triple_cost,
)
from .environment import (
    FieldSpec,
    Window,
    field_at,
    log_mgf,
    sample_field,
    split_seed,
)
from .polymer import (
    LyapunovEstimate,
    PolymerConfig,
    Trajectory,
    estimate_p_and_lyapunov,
    free_energy,
    path_sum_oracle,
    run,
    step,
)
from .functionals import (
    LocalizationReport,
    UpdateSample,
    cluster_functional,
    clustering_mass,
    covering_radius,
    density_clustering_mass,
    expected_log_ratio,
    lifted_distance_bound,
    localization_functionals,
    mass_defect_stats,
    mean_expected_log_ratio,
    tent_density,
    update_sample,
)
from .harness import (
    DiagnosticGrids,
    ResultRow,
    RunConfig,
    cmd_diagnose,
    cmd_selftest,
    cmd_simulate,
    cmd_sweep,
    load_run_config,
    matched_transport_residual,
    reference_collections,
)

__all__ = [
    "ConfigError",
    "NumericContractError",
    "PropertyFailure",
    "GridMeasure",
    "LayeredMeasure",
    "PointMeasure",
    "StepDistribution",
    "ball_mass",
    "convolve",
    "heaviest_ball",
    "total_mass",
    "TransportPlan",
    "dual_lower_bound",
    "generalized_wasserstein",
    "wasserstein",
    "MatchPair",
    "Matching",
    "Triple",
    "UpperBoundResult",
    "concentration",
    "functional_metric",
    "metric_exact",
    "metric_upper",
    "separation",
    "triple_cost",
    "FieldSpec",
    "Window",
    "field_at",
    "log_mgf",
    "sample_field",
    "split_seed",
    "LyapunovEstimate",
    "PolymerConfig",
    "Trajectory",
    "estimate_p_and_lyapunov",
    "free_energy",
    "path_sum_oracle",
    "run",
    "step",
    "LocalizationReport",
    "UpdateSample",
    "cluster_functional",
    "clustering_mass",
    "covering_radius",
    "density_clustering_mass",
    "expected_log_ratio",
    "lifted_distance_bound",
    "localization_functionals",
    "mass_defect_stats",
    "mean_expected_log_ratio",
    "tent_density",
    "update_sample",
    "DiagnosticGrids",
    "ResultRow",
    "RunConfig",
    "cmd_diagnose",
    "cmd_selftest",
    "cmd_simulate",
    "cmd_sweep",
    "load_run_config",
    "matched_transport_residual",
    "reference_collections",
    "__version__",
]
