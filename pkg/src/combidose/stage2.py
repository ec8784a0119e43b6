"""Stage 2: adaptive randomization along a fixed MTD curve.

The first n1 patients are spread equally over the curve coordinate z; each
later cohort of n2 is drawn by rejection sampling from the density
proportional to the current posterior-mean median-TTP curve, so enrollment
concentrates where efficacy looks best.  Interim analyses run when the
current cohort's progression status is resolved, with administrative
censoring at the interim calendar time capped at the follow-up limit.
Futility and toxicity rules can stop the trial early.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import beta as beta_dist

from .mcmc import Identity, Logit, MCMCConfig, PosteriorChain, sample
from .model import (
    DEFAULT_SCALE,
    DomainError,
    DoseScale,
    MTDCurve,
    Stage2Record,
    TTPParams,
    TTPPriorConfig,
    dose_at_z,
    lambda_spline,
)
from .seeds import derive

PARAM_NAMES = ("b0", "b1", "b2", "b3", "b4", "b5", "phi4", "phi5", "k")


@dataclass(frozen=True)
class Stage2Config:
    n_max: int = 30
    n1: int = 10
    n2: int = 5
    med0: float = 4.0
    delta_u: float = 0.8
    delta_0: float = 0.10
    accrual_rate: float = 1.0
    followup_cap: float = 6.0
    tox_target: float = 0.33
    tox_margin: float = 0.1
    tox_monitor_threshold: float = 0.8
    prior: TTPPriorConfig = TTPPriorConfig()
    mcmc: MCMCConfig = MCMCConfig()
    poisson_accrual: bool = False
    grid_size: int = 101
    envelope_grid: int = 1001

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 1 or self.n_max < self.n1:
            raise DomainError("need n1 >= 2, n2 >= 1 and n_max >= n1")
        if (self.n_max - self.n1) % self.n2 != 0:
            raise DomainError("n_max must be reachable as n1 + k*n2")
        if not 0.0 < self.delta_0 < self.delta_u < 1.0:
            raise DomainError("need 0 < delta_0 < delta_u < 1")
        if self.med0 <= 0 or self.accrual_rate <= 0 or self.followup_cap <= 0:
            raise DomainError("med0, accrual_rate and followup_cap must be positive")


@dataclass(frozen=True)
class ProbCurve:
    """P(median TTP at z exceeds the null median | data) on a z grid."""

    grid: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise DomainError("probabilities must lie in [0,1]")
        if np.any(np.diff(self.grid) <= 0):
            raise DomainError("grid must be strictly increasing")

    @property
    def max_prob(self) -> float:
        return float(np.max(self.probs))


def median_curve_draws(chain: PosteriorChain, grid: np.ndarray) -> np.ndarray:
    """Median TTP per retained draw on the grid, shape (draws, grid)."""
    d = chain.draws
    beta, phi4, phi5, k = d[:, :6], d[:, 6:7], d[:, 7:8], d[:, 8:9]
    z = np.asarray(grid, dtype=float)[None, :]
    s = (beta[:, 0:1] + beta[:, 1:2] * z + beta[:, 2:3] * z ** 2
         + beta[:, 3:4] * z ** 3
         + beta[:, 4:5] * np.clip(z - phi4, 0.0, None) ** 3
         + beta[:, 5:6] * np.clip(z - phi5, 0.0, None) ** 3)
    return np.exp(s) * math.log(2.0) ** (1.0 / k)


def prob_exceed_curve(chain: PosteriorChain, med0: float,
                      grid: np.ndarray | None = None) -> ProbCurve:
    """Fraction of posterior draws whose median TTP beats med0, per grid z."""
    if len(chain) == 0:
        raise DomainError("empty posterior chain")
    if grid is None:
        grid = np.linspace(0.0, 1.0, 101)
    med = median_curve_draws(chain, grid)
    return ProbCurve(grid=np.asarray(grid, dtype=float),
                     probs=np.mean(med > med0, axis=0))


def posterior_mean_median(chain: PosteriorChain, grid: np.ndarray) -> np.ndarray:
    return median_curve_draws(chain, grid).mean(axis=0)


def optimal_dose(prob_curve: ProbCurve) -> float:
    """Grid z maximizing the exceedance probability; ties go to the
    smallest z (least drug exposure)."""
    return float(prob_curve.grid[int(np.argmax(prob_curve.probs))])


def futility_stop(prob_curve: ProbCurve, delta_0: float) -> bool:
    """True when even the best grid point has exceedance probability
    strictly below delta_0."""
    return prob_curve.max_prob < delta_0


def toxicity_monitor(records: Sequence[Stage2Record], tox_target: float,
                     tox_margin: float, threshold: float) -> bool:
    """Beta(1,1)-binomial monitor of the stage-2 DLT rate.

    True when P(rate > tox_target + tox_margin | data) exceeds threshold.
    """
    s = sum(r.dlt for r in records)
    n = len(records)
    tail = float(beta_dist.sf(tox_target + tox_margin, 1 + s, 1 + n - s))
    return tail > threshold


def rejection_sample_doses(chain, n: int, rng: np.random.Generator,
                           envelope_grid: int = 1001,
                           return_stats: bool = False):
    """n draws from the density proportional to the posterior-mean median
    TTP curve, by rejection with a uniform proposal.

    `chain` may also be a precomputed target array on an equally spaced
    grid over [0,1].  The envelope constant is 1.01 times the grid maximum.
    """
    if isinstance(chain, PosteriorChain):
        if len(chain) == 0:
            raise DomainError("empty posterior chain")
        grid = np.linspace(0.0, 1.0, envelope_grid)
        target = posterior_mean_median(chain, grid)
    else:
        target = np.asarray(chain, dtype=float)
        grid = np.linspace(0.0, 1.0, len(target))
    if not np.all(np.isfinite(target)) or np.any(target < 0):
        raise DomainError("target density values must be finite and nonnegative")
    m_env = 1.01 * float(np.max(target))
    if m_env <= 0:
        raise DomainError("target density is identically zero")

    out: list[np.ndarray] = []
    n_acc = 0
    n_prop = 0
    while n_acc < n:
        batch = max(256, 2 * (n - n_acc))
        z = rng.random(batch)
        u = rng.random(batch)
        keep = u * m_env <= np.interp(z, grid, target)
        out.append(z[keep])
        n_acc += int(keep.sum())
        n_prop += batch
    draws = np.concatenate(out)[:n]
    if return_stats:
        return draws, {"proposed": n_prop, "accepted": n_acc,
                       "envelope": m_env, "target_mean": float(np.mean(target))}
    return draws


# ---------------------------------------------------------------------------
# Posterior fitting
# ---------------------------------------------------------------------------

def _stage2_logpost_closure(data: Sequence[Stage2Record], prior: TTPPriorConfig):
    z = np.array([r.z for r in data])
    z2, z3 = z ** 2, z ** 3
    logt = np.log([r.time for r in data])
    d = np.array([r.delta for r in data], dtype=float)
    nd = float(d.sum())
    sum_d_logt = float(np.dot(d, logt))
    mu = np.asarray(prior.mu)
    inv2s2 = 0.5 / prior.sigma2
    k_lo, k_hi = prior.k_range
    const = math.log(2.0) - math.log(k_hi - k_lo) \
        - 3.0 * math.log(2.0 * math.pi * prior.sigma2)

    def logpost(p: np.ndarray) -> float:
        phi4, phi5, k = p[6], p[7], p[8]
        if not (0.0 <= phi4 < phi5 <= 1.0 and k_lo < k < k_hi):
            return -math.inf
        s = (p[0] + p[1] * z + p[2] * z2 + p[3] * z3
             + p[4] * np.clip(z - phi4, 0.0, None) ** 3
             + p[5] * np.clip(z - phi5, 0.0, None) ** 3)
        # log lik: sum_d [log k - log lam + (k-1)(log t - log lam)] - (t/lam)^k
        e = np.exp(np.minimum(k * (logt - s), 700.0))
        loglik = (nd * math.log(k) - k * float(s @ d)
                  + (k - 1.0) * sum_d_logt - float(e.sum()))
        dm = p[:6] - mu
        return loglik - inv2s2 * float(dm @ dm) + const

    return logpost


STAGE2_TRANSFORMS = (Identity(),) * 6 + (Logit(), Logit(), Logit(0.0, 10.0))
_STAGE2_STEPS = (0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.8, 0.8, 0.5)


def _spline_preconditioner() -> np.ndarray:
    # The raw basis (1, z, z^2, z^3, ...) is nearly collinear on [0,1],
    # which cripples single-coordinate random walks.  Sampling in the
    # QR-rotated coefficient space of a fixed reference design (knots at
    # 1/3 and 2/3) decorrelates the blocks; draws map back exactly.
    g = np.linspace(0.0, 1.0, 101)
    design = np.column_stack([np.ones_like(g), g, g ** 2, g ** 3,
                              np.clip(g - 1.0 / 3.0, 0.0, None) ** 3,
                              np.clip(g - 2.0 / 3.0, 0.0, None) ** 3])
    _, r = np.linalg.qr(design)
    return r


_PRECOND_R = _spline_preconditioner()
_PRECOND_RINV = np.linalg.inv(_PRECOND_R)


def fit_stage2(data: Sequence[Stage2Record], prior: TTPPriorConfig,
               mcmc: MCMCConfig, seed: int) -> PosteriorChain:
    """Posterior chain of (beta, knots, k) given stage-2 records."""
    if len(data) == 0:
        raise DomainError("stage-2 data must be nonempty")
    logpost = _stage2_logpost_closure(data, prior)
    rinv = _PRECOND_RINV

    def logpost_rotated(q: np.ndarray) -> float:
        p = np.empty(9)
        p[:6] = rinv @ q[:6]
        p[6:] = q[6:]
        return logpost(p)

    cfg = replace(mcmc, seed=seed,
                  initial_step_sizes=mcmc.initial_step_sizes or _STAGE2_STEPS)
    b0 = math.log(max(0.3, float(np.median([r.time for r in data]))))
    gamma0 = _PRECOND_R @ np.array([b0, 0.0, 0.0, 0.0, 0.0, 0.0])
    init = tuple(gamma0) + (1.0 / 3.0, 2.0 / 3.0, 1.0)
    rotated = sample(logpost_rotated, STAGE2_TRANSFORMS, cfg, init=init,
                     param_names=PARAM_NAMES)
    natural = np.column_stack([rotated.draws[:, :6] @ rinv.T,
                               rotated.draws[:, 6:]])
    return PosteriorChain(draws=natural,
                          acceptance_rates=rotated.acceptance_rates,
                          seed=rotated.seed, param_names=PARAM_NAMES)


# ---------------------------------------------------------------------------
# Trial engine and simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage2Analysis:
    """Everything one interim computes from the current records."""

    prob_curve: ProbCurve
    z_opt: float
    max_prob: float
    futility: bool
    toxicity: bool


@dataclass(frozen=True)
class Stage2Truth:
    """Generative truth for simulation: spline TTP parameters along the
    curve and a constant DLT rate (None means the toxicity target, since
    the curve is by definition the target contour)."""

    ttp: TTPParams
    dlt_rate: float | None = None


@dataclass(frozen=True)
class Stage2Result:
    records: tuple[Stage2Record, ...]
    rows: tuple[dict, ...]
    prob_curve: ProbCurve
    z_opt: float
    max_prob: float
    reject_h0: bool
    stop_reason: str            # "completed" | "futility" | "toxicity"
    calendar_time: float
    n_enrolled: int
    adaptive_z: tuple[float, ...]   # assignments beyond the first n1
    true_event_times: tuple[float, ...]  # generative times, for diagnostics
    seed: int

    @property
    def stopped_early(self) -> bool:
        return self.stop_reason != "completed"

    @property
    def dlt_rate(self) -> float:
        return sum(r.dlt for r in self.records) / len(self.records)


def analyze_stage2(records: Sequence[Stage2Record], config: Stage2Config,
                   chain: PosteriorChain) -> Stage2Analysis:
    grid = np.linspace(0.0, 1.0, config.grid_size)
    pc = prob_exceed_curve(chain, config.med0, grid)
    return Stage2Analysis(
        prob_curve=pc, z_opt=optimal_dose(pc), max_prob=pc.max_prob,
        futility=futility_stop(pc, config.delta_0),
        toxicity=toxicity_monitor(records, config.tox_target,
                                  config.tox_margin,
                                  config.tox_monitor_threshold))


class Stage2Engine:
    """Incremental stage-2 conduct for the live service.

    Outcomes arrive as resolved records; each submission refits the
    posterior and, unless a stopping rule fires, returns the next cohort of
    rejection-sampled coordinates.  Deterministic given the engine seed.
    """

    def __init__(self, config: Stage2Config, curve: MTDCurve, seed: int,
                 scale: DoseScale = DEFAULT_SCALE):
        self.config = config
        self.curve = curve
        self.seed = seed
        self.scale = scale
        self.records: list[Stage2Record] = []
        self.n_fits = 0
        self.stopped: str | None = None
        self.chain: PosteriorChain | None = None
        self.last_analysis: Stage2Analysis | None = None

    @property
    def n_enrolled(self) -> int:
        return len(self.records)

    def initial_cohort_z(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.config.n1)

    def submit(self, outcomes: Sequence[Stage2Record]) -> Stage2Analysis:
        if self.stopped is not None:
            raise DomainError(f"trial already stopped ({self.stopped})")
        if self.n_enrolled + len(outcomes) > self.config.n_max:
            raise DomainError("enrolling beyond n_max")
        self.records.extend(outcomes)
        self.chain = fit_stage2(self.records, self.config.prior,
                                self.config.mcmc,
                                derive(self.seed, 2, self.n_fits))
        analysis = analyze_stage2(self.records, self.config, self.chain)
        self.last_analysis = analysis
        if analysis.toxicity:
            self.stopped = "toxicity"
        elif analysis.futility:
            self.stopped = "futility"
        elif self.n_enrolled >= self.config.n_max:
            self.stopped = "completed"
        self.n_fits += 1
        return analysis

    def next_cohort(self) -> list:
        """Rejection-sampled dose combinations for the next n2 patients."""
        if self.stopped is not None:
            raise DomainError(f"trial stopped ({self.stopped})")
        if self.chain is None:
            raise DomainError("no posterior fit yet")
        rng = np.random.default_rng(derive(self.seed, 3, self.n_fits))
        zs = rejection_sample_doses(self.chain, self.config.n2, rng,
                                    self.config.envelope_grid)
        return [(float(z), dose_at_z(self.curve, float(z), self.scale))
                for z in zs]


def run_stage2(curve: MTDCurve, truth: Stage2Truth, config: Stage2Config,
               seed: int, scale: DoseScale = DEFAULT_SCALE) -> Stage2Result:
    """Simulate one stage-2 trial along the given curve.

    Patients arrive with deterministic inter-arrival 1/accrual_rate (or
    exponential gaps under poisson_accrual); the interim for each cohort
    runs once every member's progression status is resolved, with all
    observation times administratively censored at the interim calendar
    time and capped at followup_cap.
    """
    rng = np.random.default_rng(derive(seed, 0))
    dlt_rate = config.tox_target if truth.dlt_rate is None else truth.dlt_rate
    cap = config.followup_cap

    patients: list[dict] = []   # z, enroll, event_time, dlt, cohort

    def enroll_cohort(zs, t_start, cohort):
        t = t_start
        for z in zs:
            gap = (rng.exponential(1.0 / config.accrual_rate)
                   if config.poisson_accrual else 1.0 / config.accrual_rate)
            t = t + gap if patients else 0.0
            lam = lambda_spline(truth.ttp, float(z))
            event = lam * float(rng.weibull(truth.ttp.k))
            dlt = int(rng.random() < dlt_rate)
            patients.append({"z": float(z), "enroll": t, "event": event,
                             "dlt": dlt, "cohort": cohort})
        return t

    def interim_records(tau: float) -> list[Stage2Record]:
        recs = []
        for p in patients:
            follow = min(cap, tau - p["enroll"])
            time = min(p["event"], follow)
            recs.append(Stage2Record(z=p["z"], time=time,
                                     delta=int(p["event"] <= follow),
                                     enroll_time=p["enroll"], dlt=p["dlt"]))
        return recs

    zs = list(np.linspace(0.0, 1.0, config.n1))
    cohort = 1
    clock = 0.0     # arrivals for the next cohort start after this time
    n_fits = 0
    adaptive_z: list[float] = []
    stop_reason = "completed"

    while True:
        enroll_cohort(zs, clock, cohort)
        new = patients[-len(zs):]
        tau = max(p["enroll"] + min(p["event"], cap) for p in new)
        clock = tau
        records = interim_records(tau)
        chain = fit_stage2(records, config.prior, config.mcmc,
                           derive(seed, 2, n_fits))
        n_fits += 1
        analysis = analyze_stage2(records, config, chain)
        if analysis.toxicity and len(patients) < config.n_max:
            stop_reason = "toxicity"
            break
        if analysis.futility and len(patients) < config.n_max:
            stop_reason = "futility"
            break
        if len(patients) >= config.n_max:
            break
        zs = list(rejection_sample_doses(chain, config.n2, rng,
                                         config.envelope_grid))
        adaptive_z.extend(float(z) for z in zs)
        cohort += 1

    rows = []
    for i, (p, r) in enumerate(zip(patients, records)):
        dose = dose_at_z(curve, p["z"], scale)
        rows.append({"patient_id": i + 1, "cohort": p["cohort"], "z": p["z"],
                     "raw_x": dose.raw_x, "raw_y": dose.raw_y,
                     "enroll_time": p["enroll"], "time": r.time,
                     "event": r.delta, "dlt": p["dlt"]})
    rows = tuple(rows)
    return Stage2Result(records=tuple(records), rows=rows,
                        prob_curve=analysis.prob_curve,
                        z_opt=analysis.z_opt, max_prob=analysis.max_prob,
                        reject_h0=analysis.max_prob > config.delta_u,
                        stop_reason=stop_reason, calendar_time=tau,
                        n_enrolled=len(patients),
                        adaptive_z=tuple(adaptive_z),
                        true_event_times=tuple(p["event"] for p in patients),
                        seed=seed)


def export_stage2_csv(result: Stage2Result, path) -> None:
    """Trajectory CSV: patient_id, cohort, z, raw_x, raw_y, enroll_time,
    time, event, dlt."""
    cols = ("patient_id", "cohort", "z", "raw_x", "raw_y", "enroll_time",
            "time", "event", "dlt")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in result.rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in cols) + "\n")
