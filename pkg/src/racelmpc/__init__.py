"""Lap-time-learning MPC with error-dynamics regression, at desk scale."""

from .track import FrenetPose, TrackModel, build_track
from .vehicle import (
    AtvModel,
    NominalModel,
    VehicleParams,
    barc_nominal_overconfident,
    barc_truth,
    linearize_nominal,
    step_nominal,
    tire_force_pacejka,
)
from .simulator import LapRecord, SimConfig, StepOutcome, run_lap, simulate_step
from .dataset import Dataset, RegressionMetric, SafeSetQuery, cost_to_go_vector
from .learning import (
    LearnerConfig,
    LocalModelLearner,
    compute_error_residual_targets,
    epanechnikov,
    fit_channel,
    learn_local_model,
    model_error_frobenius,
)
from .qp import QpProblem, QpSolution, kkt_residuals, solve, solve_lp_over_simplex
from .controller import (
    LmpcConfig,
    LmpcController,
    ReferenceSequence,
    initialize_reference,
    run_iteration,
)
from .experiment import (
    ExperimentSpec,
    MetricsReport,
    compute_metrics,
    run_experiment,
    run_sweep,
    seed_dataset,
)

__version__ = "0.1.0"
