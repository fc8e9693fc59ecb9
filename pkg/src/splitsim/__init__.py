"""Split federated learning under unreliable participation.

Plan client sampling probabilities and model cut layers that minimize a
convergence upper bound subject to a latency budget, simulate the resulting
training process with stochastic upload, download, and aggregation failures,
and calibrate the bound's constants from data.
"""

from .bound import (
    BoundBreakdown,
    bound_coefficient,
    coefficient_parts,
    convergence_upper_bound,
    discrepancy_bound,
    exact_amplification_cap,
    rounds_to_accuracy,
)
from .estimation import (
    EstimationReport,
    calibrate,
    estimate_beta_cross,
    estimate_beta_local,
    estimate_layer_stats,
    estimate_loss_gap,
)
from .harness import (
    POLICIES,
    CalibrationSpec,
    ExperimentConfig,
    ExperimentResult,
    ModelDataSpec,
    PopulationSpec,
    Range,
    compare_policies,
    generate_population,
    load_config,
    parse_config,
    perturb_probabilities,
    plan_experiment,
    prepare_experiment,
    round_robin_sampler,
    run_experiment,
    select_plan,
    write_artifacts,
)
from .latency import (
    LatencyProfile,
    best_split,
    expected_round_latency,
    per_client_latency,
)
from .model import (
    LayeredModel,
    ModelSpec,
    draw_batch,
    gaussian_clusters,
    partition_by_primary_class,
    partition_iid,
    profile_from_widths,
)
from .optimizer import (
    InfeasibleError,
    IterationRecord,
    OptimizerResult,
    Partition,
    Tolerances,
    enforce_max_cut,
    negative_branch_probability,
    optimize,
    partition_clients,
    positive_branch_probability,
    solve_at_max_cut,
    solve_multipliers,
)
from .simulator import (
    FailureSampler,
    RoundRecord,
    SimulationTrace,
    aggregate_client_specific,
    aggregate_common,
    client_side_step,
    forge_personal_block,
    run_training,
    sample_clients,
    server_side_step,
)
from .types import (
    ClientProfile,
    ModelStatistics,
    Population,
    SamplingPlan,
    SystemConfig,
    ValidationError,
    amplification,
    validate_plan,
    validate_population,
)

__version__ = "0.1.0"

__all__ = [
    "POLICIES",
    "BoundBreakdown",
    "CalibrationSpec",
    "ClientProfile",
    "EstimationReport",
    "ExperimentConfig",
    "ExperimentResult",
    "FailureSampler",
    "InfeasibleError",
    "IterationRecord",
    "LatencyProfile",
    "LayeredModel",
    "ModelDataSpec",
    "ModelSpec",
    "ModelStatistics",
    "OptimizerResult",
    "Partition",
    "Population",
    "PopulationSpec",
    "Range",
    "RoundRecord",
    "SamplingPlan",
    "SimulationTrace",
    "SystemConfig",
    "Tolerances",
    "ValidationError",
    "aggregate_client_specific",
    "aggregate_common",
    "amplification",
    "best_split",
    "bound_coefficient",
    "calibrate",
    "client_side_step",
    "coefficient_parts",
    "compare_policies",
    "convergence_upper_bound",
    "discrepancy_bound",
    "draw_batch",
    "enforce_max_cut",
    "estimate_beta_cross",
    "estimate_beta_local",
    "estimate_layer_stats",
    "estimate_loss_gap",
    "exact_amplification_cap",
    "expected_round_latency",
    "forge_personal_block",
    "gaussian_clusters",
    "generate_population",
    "load_config",
    "negative_branch_probability",
    "optimize",
    "parse_config",
    "partition_by_primary_class",
    "partition_clients",
    "partition_iid",
    "per_client_latency",
    "perturb_probabilities",
    "plan_experiment",
    "positive_branch_probability",
    "prepare_experiment",
    "profile_from_widths",
    "rounds_to_accuracy",
    "round_robin_sampler",
    "run_experiment",
    "run_training",
    "sample_clients",
    "select_plan",
    "server_side_step",
    "solve_at_max_cut",
    "solve_multipliers",
    "validate_plan",
    "validate_population",
    "write_artifacts",
]
