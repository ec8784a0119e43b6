"""Core probability models for the two-stage combination design.

Stage 1 models the probability of dose-limiting toxicity (DLT) for two
continuously dosed agents on the standardized unit square, reparameterized
through the corner probabilities (rho00, rho10, rho01) and an interaction
term eta3.  The maximum tolerated dose (MTD) curve is the theta-contour of
that surface.

Stage 2 models time to progression (TTP) as a Weibull whose scale varies
along the MTD curve through a cubic spline in the one-dimensional curve
coordinate z in [0, 1].

Everything here is a pure function of its arguments; parameter containers
are frozen dataclasses and safe to share across threads or processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NoCurveError(DomainError):
    """The requested toxicity contour does not intersect the dose square."""


# ---------------------------------------------------------------------------
# Link function
# ---------------------------------------------------------------------------

class LogisticLink:
    """Logistic CDF / quantile pair used as the dose-toxicity link.

    The link is pluggable in principle (anything with ``cdf`` and
    ``quantile``), but only the logistic ships.
    """

    @staticmethod
    def cdf(u):
        return special.expit(u)

    @staticmethod
    def quantile(p):
        return special.logit(p)


LINK = LogisticLink()


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _log_sigmoid(u):
    # log F(u) for the logistic link, stable for large |u|
    u = np.asarray(u, dtype=float)
    return np.where(u > 0, -np.log1p(np.exp(-np.abs(u))),
                    u - np.log1p(np.exp(-np.abs(u))))


# ---------------------------------------------------------------------------
# Dose bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoseScale:
    """Raw (mg/m^2) dose ranges defining the standardized unit square.

    Defaults are the cabazitaxel (agent A, 10-25) and cisplatin
    (agent B, 50-100) ranges of the motivating trial.
    """

    x_min: float = 10.0
    x_max: float = 25.0
    y_min: float = 50.0
    y_max: float = 100.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError("dose ranges must have positive width")

    def to_raw_x(self, x: float) -> float:
        return self.x_min + x * (self.x_max - self.x_min)

    def to_raw_y(self, y: float) -> float:
        return self.y_min + y * (self.y_max - self.y_min)

    def combination(self, x: float, y: float) -> "DoseCombination":
        """Build a DoseCombination from standardized coordinates."""
        return DoseCombination(x=x, y=y,
                               raw_x=self.to_raw_x(x), raw_y=self.to_raw_y(y))

    def from_raw(self, raw_x: float, raw_y: float) -> "DoseCombination":
        x = (raw_x - self.x_min) / (self.x_max - self.x_min)
        y = (raw_y - self.y_min) / (self.y_max - self.y_min)
        return DoseCombination(x=x, y=y, raw_x=raw_x, raw_y=raw_y)


DEFAULT_SCALE = DoseScale()


@dataclass(frozen=True)
class DoseCombination:
    """A dose pair in both standardized ([0,1]) and raw (mg/m^2) units."""

    x: float
    y: float
    raw_x: float
    raw_y: float

    def __post_init__(self):
        if not (-1e-12 <= self.x <= 1 + 1e-12 and -1e-12 <= self.y <= 1 + 1e-12):
            raise DomainError(f"standardized doses outside [0,1]: ({self.x}, {self.y})")


# ---------------------------------------------------------------------------
# Stage-1 toxicity model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToxParams:
    """Reparameterized dose-toxicity model.

    rho00, rho10, rho01 are the DLT probabilities at the (0,0), (1,0) and
    (0,1) corners of the standardized square; eta3 > 0 is the interaction.
    Construction does not enforce the support so samplers can evaluate
    out-of-support proposals; use ``in_support`` to test it.
    """

    rho00: float
    rho10: float
    rho01: float
    eta3: float

    def in_support(self) -> bool:
        return (0.0 < self.rho00 < min(self.rho10, self.rho01)
                and self.rho10 < 1.0 and self.rho01 < 1.0
                and self.eta3 > 0.0)

    def linear_coef(self) -> tuple[float, float, float]:
        """(eta0, eta1, eta2) of the linear predictor on the logit scale."""
        l00 = _logit(self.rho00)
        return l00, _logit(self.rho10) - l00, _logit(self.rho01) - l00


@dataclass(frozen=True)
class ToxPriorConfig:
    """Hyperparameters of the stage-1 prior.

    rho01 ~ Beta(a1,b1), rho10 ~ Beta(a2,b2), and conditionally
    rho00/min(rho01,rho10) ~ Beta(a3,b3); eta3 ~ Gamma(shape=a, rate=b)
    so the prior mean is a/b and variance a/b^2.
    """

    a1: float = 1.0
    b1: float = 1.0
    a2: float = 1.0
    b2: float = 1.0
    a3: float = 1.0
    b3: float = 1.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        vals = (self.a1, self.b1, self.a2, self.b2, self.a3, self.b3, self.a, self.b)
        if any(v <= 0 or not math.isfinite(v) for v in vals):
            raise DomainError("prior hyperparameters must be strictly positive")


@dataclass(frozen=True)
class Stage1Record:
    """One stage-1 observation: standardized doses and the binary DLT flag."""

    x: float
    y: float
    dlt: int


def _validate_tox_params(params: ToxParams) -> None:
    if not params.in_support():
        raise DomainError(f"toxicity parameters outside support: {params}")


def prob_dlt(params: ToxParams, x, y):
    """DLT probability at standardized doses (x, y).

    Implements the logistic-link surface anchored at the corner
    probabilities: F(F^-1(rho00) + (F^-1(rho10)-F^-1(rho00)) x
    + (F^-1(rho01)-F^-1(rho00)) y + eta3 x y).  Strictly increasing in
    each coordinate.
    """
    _validate_tox_params(params)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < 0) or np.any(x > 1) or np.any(y < 0) or np.any(y > 1):
        raise DomainError("doses must lie in the standardized unit square")
    l00, ex, ey = params.linear_coef()
    return LINK.cdf(l00 + ex * x + ey * y + params.eta3 * x * y)


def mtd_x_given_y(params: ToxParams, y, theta: float):
    """Dose of agent A with DLT probability theta at fixed agent-B dose y.

    Closed-form inversion of the linear-in-x logit expression, clipped to
    [0, 1]: 0 when even x=0 exceeds theta, 1 when x=1 stays below it.
    """
    y = np.asarray(y, dtype=float)
    l00, ex, ey = params.linear_coef()
    x = (_logit(theta) - l00 - ey * y) / (ex + params.eta3 * y)
    return np.clip(x, 0.0, 1.0)


def mtd_y_given_x(params: ToxParams, x, theta: float):
    """Dose of agent B with DLT probability theta at fixed agent-A dose x."""
    x = np.asarray(x, dtype=float)
    l00, ex, ey = params.linear_coef()
    y = (_logit(theta) - l00 - ex * x) / (ey + params.eta3 * x)
    return np.clip(y, 0.0, 1.0)


@dataclass(frozen=True)
class MTDCurve:
    """The theta-contour of a toxicity surface, clipped to the unit square.

    y_at(x) is strictly decreasing over [x_lo, x_hi]; every point on the
    curve has DLT probability exactly theta under ``params``.
    """

    params: ToxParams
    theta: float
    x_lo: float
    x_hi: float

    def y_at(self, x):
        """Curve ordinate y*(x), not clipped to [0,1]."""
        l00, ex, ey = self.params.linear_coef()
        x = np.asarray(x, dtype=float)
        num = (_logit(self.theta) - l00) - ex * x
        den = ey + self.params.eta3 * x
        out = num / den
        return out if out.ndim else float(out)

    def grid(self, n: int = 101) -> tuple[np.ndarray, np.ndarray]:
        """n points equally spaced in x over the admissible range."""
        xs = np.linspace(self.x_lo, self.x_hi, n)
        return xs, np.clip(self.y_at(xs), 0.0, 1.0)


def mtd_curve(params: ToxParams, theta: float) -> MTDCurve:
    """The set of dose combinations with DLT probability theta.

    Raises NoCurveError when the contour misses the unit square entirely
    (theta at or below rho00, or theta above the toxicity at (1,1)).
    """
    _validate_tox_params(params)
    if not 0.0 < theta < 1.0:
        raise DomainError("theta must lie in (0,1)")
    if theta <= params.rho00:
        raise NoCurveError(f"theta={theta} <= rho00={params.rho00}: contour "
                           "lies below the minimum dose combination")
    l00, ex, ey = params.linear_coef()
    lt = _logit(theta)
    # x where y*(x)=0 and where y*(x)=1, solved from the contour formula
    x_at_y0 = (lt - l00) / ex
    x_at_y1 = (lt - _logit(params.rho01)) / (ex + params.eta3)
    x_lo = max(0.0, x_at_y1)
    x_hi = min(1.0, x_at_y0)
    if x_lo > x_hi:
        raise NoCurveError(f"theta={theta} contour does not intersect the unit square")
    return MTDCurve(params=params, theta=theta, x_lo=x_lo, x_hi=x_hi)


def log_posterior_stage1(params: ToxParams, data: Sequence[Stage1Record],
                         prior: ToxPriorConfig) -> float:
    """Unnormalized log posterior of the stage-1 model.

    Bernoulli likelihood of the DLT indicators under the toxicity surface
    plus the beta/beta/scaled-beta/gamma priors.  Support violations return
    -inf so samplers treat them as rejections.
    """
    if not params.in_support():
        return -math.inf
    if len(data) == 0:
        raise DomainError("stage-1 data must be nonempty")
    x = np.array([r.x for r in data], dtype=float)
    y = np.array([r.y for r in data], dtype=float)
    t = np.array([r.dlt for r in data], dtype=float)
    if np.any((t != 0) & (t != 1)):
        raise DomainError("DLT indicators must be binary")
    l00, ex, ey = params.linear_coef()
    u = l00 + ex * x + ey * y + params.eta3 * x * y
    loglik = float(np.sum(t * _log_sigmoid(u) + (1.0 - t) * _log_sigmoid(-u)))
    return loglik + _log_prior_stage1(params, prior)


def _log_beta_pdf(v: float, a: float, b: float) -> float:
    return ((a - 1.0) * math.log(v) + (b - 1.0) * math.log1p(-v)
            - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)))


def _log_prior_stage1(params: ToxParams, prior: ToxPriorConfig) -> float:
    m = min(params.rho01, params.rho10)
    lp = _log_beta_pdf(params.rho01, prior.a1, prior.b1)
    lp += _log_beta_pdf(params.rho10, prior.a2, prior.b2)
    # rho00/m ~ Beta(a3,b3); the 1/m factor is the Jacobian of r -> rho00
    lp += _log_beta_pdf(params.rho00 / m, prior.a3, prior.b3) - math.log(m)
    lp += (prior.a * math.log(prior.b) - math.lgamma(prior.a)
           + (prior.a - 1.0) * math.log(params.eta3) - prior.b * params.eta3)
    return lp


# ---------------------------------------------------------------------------
# Stage-2 efficacy model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TTPParams:
    """Weibull TTP model indexed along the curve coordinate z.

    beta holds the six spline coefficients; phi4 < phi5 are the free knots
    (the first knot is pinned at 0); k is the Weibull shape.
    """

    beta: tuple[float, ...]
    phi4: float
    phi5: float
    k: float

    def __post_init__(self):
        if len(self.beta) != 6:
            raise DomainError("spline needs exactly six coefficients")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    def in_support(self, k_range: tuple[float, float] = (1e-100, 10.0)) -> bool:
        return (0.0 <= self.phi4 < self.phi5 <= 1.0
                and k_range[0] < self.k < k_range[1]
                and all(math.isfinite(b) for b in self.beta))


@dataclass(frozen=True)
class TTPPriorConfig:
    """Vague stage-2 prior: beta ~ N(mu, sigma2 I), ordered-uniform knots,
    uniform Weibull shape."""

    mu: tuple[float, ...] = (0.0,) * 6
    sigma2: float = 100.0
    k_range: tuple[float, float] = (1e-100, 10.0)

    def __post_init__(self):
        if len(self.mu) != 6:
            raise DomainError("mu must have six components")
        if self.sigma2 <= 0:
            raise DomainError("sigma2 must be positive")
        if not self.k_range[0] < self.k_range[1]:
            raise DomainError("k_range must be increasing")


@dataclass(frozen=True)
class Stage2Record:
    """One stage-2 observation along the curve coordinate.

    time is the observed TTP (delta=1) or the censored follow-up time
    (delta=0), in months from that patient's enrollment; enroll_time is
    months from the start of stage 2; dlt is the binary toxicity flag used
    by the stage-2 safety monitor.
    """

    z: float
    time: float
    delta: int
    enroll_time: float = 0.0
    dlt: int = 0


def lambda_spline(params: TTPParams, z):
    """Weibull scale lambda(z) = exp(cubic spline in z), z in [0,1]."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(z > 1):
        raise DomainError("z must lie in [0,1]")
    b = params.beta
    s = (b[0] + b[1] * z + b[2] * z ** 2 + b[3] * z ** 3
         + b[4] * np.clip(z - params.phi4, 0.0, None) ** 3
         + b[5] * np.clip(z - params.phi5, 0.0, None) ** 3)
    out = np.exp(s)
    return out if out.ndim else float(out)


def weibull_median(params: TTPParams, z):
    """Median TTP at z: lambda(z) * (log 2)^(1/k)."""
    if params.k <= 0:
        raise DomainError("Weibull shape k must be positive")
    med = lambda_spline(params, z) * math.log(2.0) ** (1.0 / params.k)
    return med


def weibull_logpdf(t, lam, k: float):
    """Log density of the Weibull(scale=lam, shape=k) at t > 0."""
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return (math.log(k) - np.log(lam) + (k - 1.0) * (np.log(t) - np.log(lam))
            - (t / lam) ** k)


def weibull_logsf(t, lam, k: float):
    """Log survival of the Weibull at t: -(t/lam)^k."""
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return -((t / lam) ** k)


def log_posterior_stage2(params: TTPParams, data: Sequence[Stage2Record],
                         prior: TTPPriorConfig) -> float:
    """Unnormalized log posterior of the stage-2 model.

    Weibull log density for events, log survival for censored records,
    plus the normal / ordered-uniform / uniform priors.  Returns -inf
    outside the prior support (knot order or k range violated).
    """
    if not params.in_support(prior.k_range):
        return -math.inf
    z = np.array([r.z for r in data], dtype=float)
    t = np.array([r.time for r in data], dtype=float)
    d = np.array([r.delta for r in data], dtype=float)
    if np.any(t <= 0):
        raise DomainError("all observation times must be positive")
    if np.any((d != 0) & (d != 1)):
        raise DomainError("censoring indicators must be binary")
    lam = lambda_spline(params, z)
    k = params.k
    loglik = float(np.sum(d * (math.log(k) - np.log(lam)
                               + (k - 1.0) * (np.log(t) - np.log(lam)))
                          - (t / lam) ** k))
    return loglik + _log_prior_stage2(params, prior)


def _log_prior_stage2(params: TTPParams, prior: TTPPriorConfig) -> float:
    s2 = prior.sigma2
    lp = sum(-0.5 * (b - m) ** 2 / s2 - 0.5 * math.log(2.0 * math.pi * s2)
             for b, m in zip(params.beta, prior.mu))
    lp += math.log(2.0)  # ordered-uniform knot density on the triangle
    lp -= math.log(prior.k_range[1] - prior.k_range[0])
    return lp


# ---------------------------------------------------------------------------
# Curve coordinate z
# ---------------------------------------------------------------------------

def dose_at_z(curve: MTDCurve, z: float, scale: DoseScale = DEFAULT_SCALE) -> DoseCombination:
    """The dose combination at curve coordinate z in [0,1].

    z is linear in the standardized x-coordinate along the clipped curve:
    z=0 is the (x_lo, y(x_lo)) end, z=1 the (x_hi, y(x_hi)) end.
    """
    if not 0.0 <= z <= 1.0:
        raise DomainError("z must lie in [0,1]")
    x = curve.x_lo + z * (curve.x_hi - curve.x_lo)
    y = min(1.0, max(0.0, curve.y_at(x)))
    return scale.combination(x, y)


def project_to_z(curve: MTDCurve, dose: DoseCombination, tol: float = 1e-6) -> float:
    """Inverse of dose_at_z for combinations lying on the curve.

    Raises DomainError when the dose is off the curve by more than tol in y
    or outside the admissible x-range.
    """
    if not (curve.x_lo - 1e-12 <= dose.x <= curve.x_hi + 1e-12):
        raise DomainError(f"x={dose.x} outside the curve range "
                          f"[{curve.x_lo}, {curve.x_hi}]")
    y_on = min(1.0, max(0.0, curve.y_at(dose.x)))
    if abs(dose.y - y_on) > tol:
        raise DomainError(f"dose ({dose.x}, {dose.y}) lies off the curve "
                          f"(expected y={y_on})")
    width = curve.x_hi - curve.x_lo
    if width == 0.0:
        return 0.0
    return (dose.x - curve.x_lo) / width
