"""Adaptive random-walk Metropolis-within-Gibbs sampler.

One scalar parameter is updated per block; proposals are made on an
unconstrained scale defined by per-parameter bijections, with the log
Jacobian folded into the target.  Step sizes adapt toward a target
acceptance rate during burn-in only and are frozen afterward, so the
retained draws come from a fixed kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class InitializationError(ValueError):
    """The log density is not finite at the requested initial point."""


# ---------------------------------------------------------------------------
# Support transforms
# ---------------------------------------------------------------------------

class Identity:
    def to_unconstrained(self, x: float) -> float:
        return x

    def to_natural(self, u: float) -> float:
        return u

    def log_jac(self, u: float) -> float:
        return 0.0


class Log:
    """Positive reals via x = exp(u)."""

    def to_unconstrained(self, x: float) -> float:
        return math.log(x)

    def to_natural(self, u: float) -> float:
        return math.exp(u)

    def log_jac(self, u: float) -> float:
        return u


class Logit:
    """Bounded interval (lo, hi) via a scaled logistic."""

    def __init__(self, lo: float = 0.0, hi: float = 1.0):
        self.lo = lo
        self.hi = hi

    def to_unconstrained(self, x: float) -> float:
        p = (x - self.lo) / (self.hi - self.lo)
        return math.log(p) - math.log1p(-p)

    def to_natural(self, u: float) -> float:
        if u >= 0:
            s = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            s = e / (1.0 + e)
        return self.lo + (self.hi - self.lo) * s

    def log_jac(self, u: float) -> float:
        # log(hi-lo) + log sigma(u) + log(1-sigma(u))
        a = -abs(u)
        return math.log(self.hi - self.lo) + a - 2.0 * math.log1p(math.exp(a))


@dataclass(frozen=True)
class MCMCConfig:
    """Sampler settings; defaults are the desk-scale trial-fit values."""

    burn_in: int = 2000
    keep: int = 2000
    thin: int = 1
    initial_step_sizes: tuple[float, ...] | None = None
    adapt_target: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 100 or self.thin < 1:
            raise ValueError("need burn_in >= 0, keep >= 100, thin >= 1")
        if not 0.0 < self.adapt_target < 1.0:
            raise ValueError("adapt_target must lie in (0,1)")


@dataclass(frozen=True)
class PosteriorChain:
    """Retained draws in the model's natural parameter space."""

    draws: np.ndarray  # (keep, p)
    acceptance_rates: tuple[float, ...]
    seed: int
    param_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.param_names.index(name)]

    def to_csv(self, path) -> None:
        """Dump the chain: header of parameter names, one draw per line."""
        header = ",".join(self.param_names)
        np.savetxt(path, self.draws, delimiter=",", header=header, comments="")


def sample(log_density: Callable[[np.ndarray], float],
           support_transform: Sequence,
           config: MCMCConfig,
           init: Sequence[float],
           param_names: Sequence[str] | None = None) -> PosteriorChain:
    """Draw from an unnormalized log density by adaptive RWM-within-Gibbs.

    log_density takes the natural parameter vector and may return -inf for
    out-of-support states.  Deterministic given config.seed.
    """
    p = len(init)
    if len(support_transform) != p:
        raise ValueError("one transform per parameter is required")
    names = tuple(param_names) if param_names else tuple(f"p{i}" for i in range(p))

    u = np.array([support_transform[i].to_unconstrained(init[i]) for i in range(p)])
    x = np.array([float(v) for v in init])
    ljac = np.array([support_transform[i].log_jac(u[i]) for i in range(p)])
    ld = log_density(x)
    if not math.isfinite(ld):
        raise InitializationError("log density is not finite at the initial point")

    if config.initial_step_sizes is not None:
        if len(config.initial_step_sizes) != p:
            raise ValueError("need one initial step size per parameter")
        log_step = np.log(np.asarray(config.initial_step_sizes, dtype=float))
    else:
        log_step = np.full(p, math.log(0.5))

    n_sweeps = config.burn_in + config.keep * config.thin
    rng = np.random.default_rng(config.seed)
    normals = rng.standard_normal((n_sweeps, p))
    with np.errstate(divide="ignore"):
        log_unifs = np.log(rng.random((n_sweeps, p)))

    draws = np.empty((config.keep, p))
    accepts = np.zeros(p)
    proposals = np.zeros(p)
    kept = 0

    for s in range(n_sweeps):
        adapting = s < config.burn_in
        gamma = (s + 1.0) ** -0.6 if adapting else 0.0
        for j in range(p):
            uj_old, xj_old, lj_old = u[j], x[j], ljac[j]
            u[j] = uj_old + math.exp(log_step[j]) * normals[s, j]
            x[j] = support_transform[j].to_natural(u[j])
            ljac[j] = support_transform[j].log_jac(u[j])
            ld_new = log_density(x)
            if math.isfinite(ld_new):
                log_ratio = (ld_new - ld) + (ljac[j] - lj_old)
            else:
                log_ratio = -math.inf
            if log_unifs[s, j] < log_ratio:
                ld = ld_new
                if not adapting:
                    accepts[j] += 1
            else:
                u[j], x[j], ljac[j] = uj_old, xj_old, lj_old
            if not adapting:
                proposals[j] += 1
            else:
                acc_prob = math.exp(min(0.0, log_ratio))
                log_step[j] += gamma * (acc_prob - config.adapt_target)
        if not adapting and (s - config.burn_in + 1) % config.thin == 0:
            draws[kept] = x
            kept += 1

    rates = tuple(float(a / max(1.0, n)) for a, n in zip(accepts, proposals))
    return PosteriorChain(draws=draws, acceptance_rates=rates,
                          seed=config.seed, param_names=names)


def quantile(chain: PosteriorChain, param_index: int, q: float) -> float:
    """Empirical quantile of a parameter's retained draws (linear
    interpolation between order statistics)."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0,1)")
    return float(np.quantile(chain.draws[:, param_index], q))


def median(chain: PosteriorChain, param_index: int) -> float:
    return quantile(chain, param_index, 0.5)
