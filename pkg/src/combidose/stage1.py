"""Stage 1: conditional EWOC escalation toward the MTD curve.

Patients enter in cohorts of two.  After each cohort the toxicity posterior
is refit; the next cohort receives the alpha-quantile of the conditional
posterior MTD of one agent given the most recently assigned dose of the
other, with the feasibility bound alpha rising from 0.25 to 0.5 over the
first half of the trial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import beta as beta_dist, gamma as gamma_dist

from .mcmc import Log, Logit, MCMCConfig, PosteriorChain, sample
from .model import (
    DEFAULT_SCALE,
    DomainError,
    DoseCombination,
    DoseScale,
    MTDCurve,
    NoCurveError,
    Stage1Record,
    ToxParams,
    ToxPriorConfig,
    mtd_curve,
    prob_dlt,
)
from .seeds import derive

PARAM_NAMES = ("rho00", "rho10", "rho01", "eta3")

DEFAULT_START = DEFAULT_SCALE.combination(1.0 / 3.0, 0.5)  # raw 15/75 mg/m^2


@dataclass(frozen=True)
class Stage1Config:
    n_max: int = 30
    theta: float = 0.33
    start_dose: DoseCombination = DEFAULT_START
    alpha_start: float = 0.25
    alpha_cap: float = 0.5
    prior: ToxPriorConfig = ToxPriorConfig()
    safety_threshold: float = 0.8
    mcmc: MCMCConfig = MCMCConfig()
    scale: DoseScale = DEFAULT_SCALE

    def __post_init__(self):
        if self.n_max < 2 or self.n_max % 2 != 0:
            raise DomainError("n_max must be a positive even number (cohorts of two)")
        if not 0.0 < self.theta < 1.0:
            raise DomainError("theta must lie in (0,1)")
        if not 0.0 < self.alpha_start <= self.alpha_cap <= 0.5:
            raise DomainError("need 0 < alpha_start <= alpha_cap <= 0.5")
        if not 0.0 < self.safety_threshold < 1.0:
            raise DomainError("safety_threshold must lie in (0,1)")


@dataclass
class Stage1State:
    """Mutable escalation state shared by the simulator and the service."""

    records: list[Stage1Record] = field(default_factory=list)
    cohort_index: int = 0
    alpha: float = 0.25
    stopped_for_safety: bool = False
    x_last: float = 0.0
    y_last: float = 0.0


@dataclass(frozen=True)
class Stage1Result:
    records: tuple[Stage1Record, ...]
    rows: tuple[dict, ...]          # per-patient trajectory for export
    est_params: ToxParams | None    # posterior medians from the final fit
    curve: MTDCurve | None
    stopped_for_safety: bool
    n_enrolled: int
    seed: int

    @property
    def dlt_rate(self) -> float:
        return sum(r.dlt for r in self.records) / len(self.records)


def alpha_schedule(n_enrolled: int, config: Stage1Config) -> float:
    """Feasibility bound after n_enrolled patients: linear rise reaching the
    cap exactly when half of the stage-1 sample is enrolled."""
    if not 0 <= n_enrolled <= config.n_max:
        raise DomainError("n_enrolled outside [0, n_max]")
    half = config.n_max / 2.0
    return min(config.alpha_cap,
               config.alpha_start + (config.alpha_cap - config.alpha_start)
               * n_enrolled / half)


def _conditional_mtd_x(draws: np.ndarray, y: float, theta: float) -> np.ndarray:
    lt = math.log(theta / (1.0 - theta))
    l00 = np.log(draws[:, 0] / (1.0 - draws[:, 0]))
    l10 = np.log(draws[:, 1] / (1.0 - draws[:, 1]))
    l01 = np.log(draws[:, 2] / (1.0 - draws[:, 2]))
    x = (lt - l00 - (l01 - l00) * y) / ((l10 - l00) + draws[:, 3] * y)
    return np.clip(x, 0.0, 1.0)


def _conditional_mtd_y(draws: np.ndarray, x: float, theta: float) -> np.ndarray:
    lt = math.log(theta / (1.0 - theta))
    l00 = np.log(draws[:, 0] / (1.0 - draws[:, 0]))
    l10 = np.log(draws[:, 1] / (1.0 - draws[:, 1]))
    l01 = np.log(draws[:, 2] / (1.0 - draws[:, 2]))
    y = (lt - l00 - (l10 - l00) * x) / ((l01 - l00) + draws[:, 3] * x)
    return np.clip(y, 0.0, 1.0)


def next_dose_x_given_y(chain: PosteriorChain, y: float, alpha: float,
                        theta: float) -> float:
    """alpha-quantile of the posterior MTD of agent A given agent B at y.

    Each posterior draw is inverted in closed form for the x solving
    prob_dlt(x, y) = theta, clipped to [0, 1]; the empirical alpha-quantile
    of those solutions is the EWOC dose.
    """
    if len(chain) == 0:
        raise DomainError("empty posterior chain")
    return float(np.quantile(_conditional_mtd_x(chain.draws, y, theta), alpha))


def next_dose_y_given_x(chain: PosteriorChain, x: float, alpha: float,
                        theta: float) -> float:
    """alpha-quantile of the posterior MTD of agent B given agent A at x."""
    if len(chain) == 0:
        raise DomainError("empty posterior chain")
    return float(np.quantile(_conditional_mtd_y(chain.draws, x, theta), alpha))


def safety_stop(chain: PosteriorChain, theta: float, config: Stage1Config) -> bool:
    """True when P(DLT probability at the minimum combination > theta | data)
    exceeds the safety threshold."""
    frac = float(np.mean(chain.draws[:, 0] > theta))
    return frac > config.safety_threshold


# ---------------------------------------------------------------------------
# Posterior fitting
# ---------------------------------------------------------------------------

def _stage1_logpost_closure(data: Sequence[Stage1Record], prior: ToxPriorConfig):
    x = np.array([r.x for r in data])
    y = np.array([r.y for r in data])
    xy = x * y
    sign = 2.0 * np.array([r.dlt for r in data]) - 1.0
    lg = math.lgamma
    cb1 = lg(prior.a1 + prior.b1) - lg(prior.a1) - lg(prior.b1)
    cb2 = lg(prior.a2 + prior.b2) - lg(prior.a2) - lg(prior.b2)
    cb3 = lg(prior.a3 + prior.b3) - lg(prior.a3) - lg(prior.b3)
    cg = prior.a * math.log(prior.b) - lg(prior.a)

    def logpost(p: np.ndarray) -> float:
        r00, r10, r01, e3 = p
        if not (0.0 < r00 < min(r10, r01) and r10 < 1.0 and r01 < 1.0 and e3 > 0.0):
            return -math.inf
        l00 = math.log(r00 / (1.0 - r00))
        l10 = math.log(r10 / (1.0 - r10))
        l01 = math.log(r01 / (1.0 - r01))
        v = sign * (l00 + (l10 - l00) * x + (l01 - l00) * y + e3 * xy)
        loglik = float(np.sum(np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))))
        m = min(r01, r10)
        ratio = r00 / m
        lp = cb1 + (prior.a1 - 1.0) * math.log(r01) + (prior.b1 - 1.0) * math.log1p(-r01)
        lp += cb2 + (prior.a2 - 1.0) * math.log(r10) + (prior.b2 - 1.0) * math.log1p(-r10)
        lp += (cb3 + (prior.a3 - 1.0) * math.log(ratio)
               + (prior.b3 - 1.0) * math.log1p(-ratio) - math.log(m))
        lp += cg + (prior.a - 1.0) * math.log(e3) - prior.b * e3
        return loglik + lp

    return logpost


STAGE1_TRANSFORMS = (Logit(), Logit(), Logit(), Log())
_STAGE1_STEPS = (0.8, 0.5, 0.5, 0.8)


def fit_stage1(data: Sequence[Stage1Record], prior: ToxPriorConfig,
               mcmc: MCMCConfig, seed: int) -> PosteriorChain:
    """Posterior chain for the toxicity parameters given stage-1 data."""
    logpost = _stage1_logpost_closure(data, prior)
    cfg = replace(mcmc, seed=seed,
                  initial_step_sizes=mcmc.initial_step_sizes or _STAGE1_STEPS)
    init = (0.1, 0.4, 0.4, 1.0)
    return sample(logpost, STAGE1_TRANSFORMS, cfg, init=init,
                  param_names=PARAM_NAMES)


def posterior_median_params(chain: PosteriorChain) -> ToxParams:
    med = np.quantile(chain.draws, 0.5, axis=0)
    return ToxParams(rho00=float(med[0]), rho10=float(med[1]),
                     rho01=float(med[2]), eta3=float(med[3]))


# ---------------------------------------------------------------------------
# Trial engine
# ---------------------------------------------------------------------------

class Stage1Engine:
    """Incremental stage-1 conduct: cohort dose proposal and posterior refits.

    Drives both the simulation loop and the live service; all randomness is
    seeded from the engine seed and the refit index, so a given outcome
    history always reproduces the same recommendations.
    """

    def __init__(self, config: Stage1Config, seed: int):
        self.config = config
        self.seed = seed
        self.state = Stage1State(alpha=alpha_schedule(0, config),
                                 x_last=config.start_dose.x,
                                 y_last=config.start_dose.y)
        self.chain: PosteriorChain | None = None
        self.n_fits = 0

    @property
    def n_enrolled(self) -> int:
        return len(self.state.records)

    @property
    def complete(self) -> bool:
        return self.n_enrolled >= self.config.n_max

    def first_cohort(self) -> tuple[DoseCombination, DoseCombination]:
        start = self.config.start_dose
        return start, start

    def record_outcomes(self, outcomes: Sequence[Stage1Record]) -> None:
        if self.state.stopped_for_safety:
            raise DomainError("trial already stopped for safety")
        if self.n_enrolled + len(outcomes) > self.config.n_max:
            raise DomainError("enrolling beyond n_max")
        self.state.records.extend(outcomes)
        self.state.cohort_index += 1
        # condition the next EWOC step on the doses actually administered
        if len(outcomes) == 2:
            self.state.x_last = outcomes[0].x
            self.state.y_last = outcomes[1].y

    def refit(self) -> PosteriorChain:
        self.chain = fit_stage1(self.state.records, self.config.prior,
                                self.config.mcmc,
                                derive(self.seed, 1, self.n_fits))
        self.n_fits += 1
        if safety_stop(self.chain, self.config.theta, self.config):
            self.state.stopped_for_safety = True
        return self.chain

    def next_cohort(self) -> tuple[DoseCombination, DoseCombination, float]:
        """Doses for the next cohort of two plus the alpha used."""
        if self.chain is None:
            raise DomainError("posterior has not been fit yet")
        if self.state.stopped_for_safety:
            raise DomainError("trial stopped for safety")
        alpha = alpha_schedule(self.n_enrolled, self.config)
        self.state.alpha = alpha
        theta = self.config.theta
        x_new = next_dose_x_given_y(self.chain, self.state.y_last, alpha, theta)
        y_new = next_dose_y_given_x(self.chain, self.state.x_last, alpha, theta)
        d1 = self.config.scale.combination(x_new, self.state.y_last)
        d2 = self.config.scale.combination(self.state.x_last, y_new)
        return d1, d2, alpha

    def estimate_curve(self) -> tuple[ToxParams, MTDCurve | None]:
        if self.chain is None:
            raise DomainError("posterior has not been fit yet")
        params = posterior_median_params(self.chain)
        try:
            curve = mtd_curve(params, self.config.theta)
        except NoCurveError:
            curve = None
        return params, curve


def run_stage1(truth: ToxParams, config: Stage1Config, seed: int) -> Stage1Result:
    """Simulate one stage-1 trial under a generative toxicity truth."""
    engine = Stage1Engine(config, seed)
    rng = np.random.default_rng(derive(seed, 0))
    scale = config.scale
    doses = list(engine.first_cohort())
    alpha = engine.state.alpha
    rows: list[dict] = []

    while True:
        cohort = engine.state.cohort_index + 1
        outcomes = []
        for d in doses:
            dlt = int(rng.random() < prob_dlt(truth, d.x, d.y))
            outcomes.append(Stage1Record(x=d.x, y=d.y, dlt=dlt))
            rows.append({"patient_id": len(rows) + 1, "cohort": cohort,
                         "x": d.x, "y": d.y, "raw_x": d.raw_x, "raw_y": d.raw_y,
                         "dlt": dlt, "alpha": alpha})
        engine.record_outcomes(outcomes)
        engine.refit()
        if engine.state.stopped_for_safety or engine.complete:
            break
        d1, d2, alpha = engine.next_cohort()
        doses = [d1, d2]

    if engine.state.stopped_for_safety:
        est_params, curve = None, None
    else:
        est_params, curve = engine.estimate_curve()
    return Stage1Result(records=tuple(engine.state.records), rows=tuple(rows),
                        est_params=est_params, curve=curve,
                        stopped_for_safety=engine.state.stopped_for_safety,
                        n_enrolled=engine.n_enrolled, seed=seed)


def export_stage1_csv(result: Stage1Result, path) -> None:
    """Trajectory CSV: patient_id, cohort, x, y, raw_x, raw_y, dlt, alpha."""
    cols = ("patient_id", "cohort", "x", "y", "raw_x", "raw_y", "dlt", "alpha")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in result.rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# Prior calibration
# ---------------------------------------------------------------------------

def prior_mean_dlt(prior: ToxPriorConfig, x: float, y: float,
                   n_draws: int = 20000, seed: int = 2026) -> float:
    """Prior mean DLT probability at (x, y) by Monte Carlo."""
    rng = np.random.default_rng(seed)
    u = rng.random((n_draws, 4))
    return _prior_mean_from_uniforms(prior, x, y, u)


def _prior_mean_from_uniforms(prior: ToxPriorConfig, x: float, y: float,
                              u: np.ndarray) -> float:
    eps = 1e-12
    rho01 = np.clip(beta_dist.ppf(u[:, 0], prior.a1, prior.b1), eps, 1 - eps)
    rho10 = np.clip(beta_dist.ppf(u[:, 1], prior.a2, prior.b2), eps, 1 - eps)
    rho00 = beta_dist.ppf(u[:, 2], prior.a3, prior.b3) * np.minimum(rho01, rho10)
    eta3 = gamma_dist.ppf(u[:, 3], prior.a, scale=1.0 / prior.b)
    l00 = np.log(rho00 / (1 - rho00))
    l10 = np.log(rho10 / (1 - rho10))
    l01 = np.log(rho01 / (1 - rho01))
    v = l00 + (l10 - l00) * x + (l01 - l00) * y + eta3 * x * y
    return float(np.mean(1.0 / (1.0 + np.exp(-v))))


def calibrate_prior(theta: float, x: float = 1.0 / 3.0, y: float = 0.5,
                    base: ToxPriorConfig = ToxPriorConfig(),
                    n_draws: int = 20000, seed: int = 2026) -> ToxPriorConfig:
    """Scale the prior so the prior mean DLT probability at (x, y) is theta.

    The two single-agent corner priors share one Beta(a, b): a stays at the
    base value and the common b is found by bisection on its log, using
    common random numbers so the objective is monotone and smooth in b.
    The conditional rho00 and eta3 priors are left as configured.
    """
    rng = np.random.default_rng(seed)
    u = rng.random((n_draws, 4))

    def mean_at(log_b: float) -> float:
        b = math.exp(log_b)
        cfg = replace(base, b1=b, b2=b)
        return _prior_mean_from_uniforms(cfg, x, y, u)

    lo, hi = -6.0, 6.0
    if not (mean_at(hi) <= theta <= mean_at(lo)):
        raise DomainError(f"theta={theta} not reachable by scaling the corner priors")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_at(mid) > theta:
            lo = mid
        else:
            hi = mid
    b = math.exp(0.5 * (lo + hi))
    return replace(base, b1=b, b2=b)
