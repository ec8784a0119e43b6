"""Two-stage Bayesian dose-finding for drug combinations.

Stage 1 estimates the maximum-tolerated-dose curve of two continuously
dosed agents by conditional escalation with overdose control; stage 2
adaptively randomizes patients along that curve toward the combination
with the highest posterior median time to progression.  The package runs
as a Monte Carlo simulation harness and as a live trial-conduct service.
"""

from .mcmc import MCMCConfig, PosteriorChain, median, quantile, sample
from .model import (
    DEFAULT_SCALE,
    DomainError,
    DoseCombination,
    DoseScale,
    MTDCurve,
    NoCurveError,
    Stage1Record,
    Stage2Record,
    ToxParams,
    ToxPriorConfig,
    TTPParams,
    TTPPriorConfig,
    dose_at_z,
    lambda_spline,
    log_posterior_stage1,
    log_posterior_stage2,
    mtd_curve,
    prob_dlt,
    project_to_z,
    weibull_median,
)
from .scenarios import Scenario, make_ttp_truth, shipped_scenarios, stage1_truths
from .simulate import OperatingCharacteristics, run_campaign, run_replicate
from .stage1 import Stage1Config, Stage1Result, alpha_schedule, calibrate_prior, run_stage1
from .stage2 import (
    ProbCurve,
    Stage2Config,
    Stage2Result,
    Stage2Truth,
    optimal_dose,
    prob_exceed_curve,
    rejection_sample_doses,
    run_stage2,
)

__version__ = "0.1.0"
