"""Adaptive group-sequential testing of several time-to-event endpoints in a Markovian multi-state model."""

__version__ = "0.1.0"

from .cohort import ALL_ENTRIES, FIRST_HITTING, Cohort, EventDefinition, PatientRecord, load_cohort, pfs_os_events, save_cohort
from .design import Boundaries, DesignSpec, combine_stages, conditional_error_mass, conditional_level, sequential_boundaries
from .errors import (
    CohortFormatError,
    ConfigError,
    ConvergenceError,
    MsmTrialError,
    NumericalError,
    PowerMonotonicityError,
    SingularCovarianceError,
    UnreachablePowerError,
)
from .invertibility import invertibility_report
from .model import (
    AccrualPlan,
    MultiStateModel,
    TransitionIntensity,
    cumulative_intensity,
    expected_event_fraction,
    occupation_probabilities,
    validate_model,
)
from .planning import (
    ConditionalPower,
    PlanningAssumptions,
    accrual_recalc,
    apply_recalc_rule,
    design_power,
    estimate_intensities,
    planning_moments,
    required_sample_size,
)
from .sampling import make_rng, sample_path, sample_transitions
from .scenarios import illness_death, scenario_model, scenario_plan
from .simulation import ScenarioConfig, ScenarioResult, calibrate_sample_size, run_replicate, run_scenario
from .stats import StageResult, covariance_hat, stage_increment, stage_statistic, statistics, u_vector

__all__ = [
    "accrual_recalc",
    "AccrualPlan",
    "ALL_ENTRIES",
    "apply_recalc_rule",
    "Boundaries",
    "calibrate_sample_size",
    "Cohort",
    "CohortFormatError",
    "combine_stages",
    "conditional_error_mass",
    "conditional_level",
    "ConditionalPower",
    "ConfigError",
    "ConvergenceError",
    "covariance_hat",
    "cumulative_intensity",
    "design_power",
    "DesignSpec",
    "estimate_intensities",
    "EventDefinition",
    "expected_event_fraction",
    "FIRST_HITTING",
    "illness_death",
    "invertibility_report",
    "load_cohort",
    "make_rng",
    "MsmTrialError",
    "MultiStateModel",
    "NumericalError",
    "occupation_probabilities",
    "PatientRecord",
    "pfs_os_events",
    "planning_moments",
    "PlanningAssumptions",
    "PowerMonotonicityError",
    "required_sample_size",
    "run_replicate",
    "run_scenario",
    "sample_path",
    "sample_transitions",
    "save_cohort",
    "scenario_model",
    "scenario_plan",
    "ScenarioConfig",
    "ScenarioResult",
    "sequential_boundaries",
    "SingularCovarianceError",
    "stage_increment",
    "stage_statistic",
    "StageResult",
    "statistics",
    "TransitionIntensity",
    "u_vector",
    "UnreachablePowerError",
    "validate_model",
]
