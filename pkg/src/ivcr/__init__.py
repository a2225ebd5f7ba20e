"""Instrumental-variable effect curves for competing risks data.

The package estimates how an exposure shifts each cause-specific
cumulative hazard when exposure and outcome share unmeasured confounders
and an instrument is available: a recursive estimating-equation fit
yields one cumulative effect curve per cause, an influence-function
construction yields pointwise confidence bands, and a plug-in functional
turns the cause-1 curve into a counterfactual relative risk for a chosen
subgroup. A simulation harness with seeded scenario generators supports
calibration studies.
"""

__version__ = "0.1.0"

from .dataset import (
    CohortDataset,
    EventTable,
    FittedInstrumentModel,
    InstrumentModelSpec,
    Subject,
    build_event_table,
    fit_instrument_model,
    parse_cohort_csv,
)
from .errors import (
    ConvergenceError,
    EmptySubgroupError,
    IvcrError,
    NoEventsError,
    RankDeficiencyError,
    SingularDenominatorError,
    SingularNormalEquationsError,
    ValidationError,
)
from .estimator import (
    ExtendedIvFitResult,
    IvFitResult,
    NaiveAalenResult,
    StepCurve,
    fit_iv_competing,
    fit_iv_extended,
    fit_naive_aalen,
    write_curves_csv,
)
from .functionals import (
    RrCurve,
    SubgroupHazards,
    bootstrap_rr,
    relative_risk_curve,
    subgroup_hazards,
    write_rr_csv,
)
from .inference import (
    IidResiduals,
    ThetaJacobian,
    TransitionFactors,
    VarianceCurves,
    WeightProcess,
    accumulate_transitions,
    compute_weights,
    theta_jacobian,
    variance_bands,
    write_bands_csv,
)
from .simulation import (
    GeneratedCohort,
    MonteCarloSummary,
    RrScenarioConfig,
    ScenarioConfig,
    TrueEffect,
    generate,
    generate_rr_cohort,
    run_monte_carlo,
    scenario_config,
    solve_gamma_for_rho,
    write_summary_csv,
    write_summary_json,
)

__all__ = [name for name in dir() if not name.startswith("_")]
