"""Shipped simulation scenarios.

The generative truths here are reconstructions targeting the qualitative
shapes described for the motivating cisplatin-cabazitaxel trial (curves
through, above and below the starting combination; flat, monotone, peaked
and everywhere-positive median-TTP profiles).  They are NOT the original
trial's unpublished scenario parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DomainError, ToxParams, ToxPriorConfig, TTPParams, TTPPriorConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config, Stage2Truth

PROVENANCE = ("reconstructed generative truths targeting the published "
              "scenario shapes; the original per-scenario parameters are "
              "not public")

# Prior with corner scale calibrated so the prior mean DLT probability at
# the standardized starting combination (1/3, 1/2) equals theta=0.33
# (see stage1.calibrate_prior; value frozen from the documented search).
CALIBRATED_PRIOR_033 = ToxPriorConfig(a1=1.0, b1=1.6268733939270426,
                                      a2=1.0, b2=1.6268733939270426,
                                      a3=1.0, b3=1.0, a=1.0, b=1.0)

# Pessimistic-at-the-origin variant used by safety-rule studies: the
# rho00/min ratio concentrates near 1 (shared-mechanism toxicity) and the
# interaction prior is tight, so extreme truths are flagged fast.
SAFETY_PESSIMISTIC_PRIOR = ToxPriorConfig(a3=4.0, b3=1.0, a=1.0, b=2.0)

# Table-1 reproduction prior for the induced median-TTP report: the
# published induced-prior quantiles match a coefficient scale of 100
# (variance 1e4), not the printed variance of 100.
TABLE1_PRIOR = TTPPriorConfig(sigma2=1e4)


def _tox_truth_through(p_start: float, rho00: float, eta3: float,
                       skew: float = 1.0) -> ToxParams:
    """Corner probabilities hitting DLT probability p_start at (1/3, 1/2).

    skew tilts toxicity toward agent A (skew>1) or agent B (skew<1) while
    keeping the constraint at the starting combination.
    """
    l00 = math.log(rho00 / (1 - rho00))
    lp = math.log(p_start / (1 - p_start))
    # solve dx/3 + dy/2 = lp - l00 - eta3/6 with dx = skew * dy
    rhs = lp - l00 - eta3 / 6.0
    dy = rhs / (skew / 3.0 + 0.5)
    dx = skew * dy
    if dx <= 0 or dy <= 0:
        raise DomainError("start probability too low for this rho00/eta3")
    rho10 = 1.0 / (1.0 + math.exp(-(l00 + dx)))
    rho01 = 1.0 / (1.0 + math.exp(-(l00 + dy)))
    return ToxParams(rho00=rho00, rho10=rho10, rho01=rho01, eta3=eta3)


def stage1_truths() -> dict[str, ToxParams]:
    """Twelve stage-1 scenario truths: the theta-contour passes through,
    above or below the starting combination, plus asymmetric-toxicity
    variants."""
    t = {}
    t["through_mild"] = _tox_truth_through(0.33, rho00=0.05, eta3=1.0)
    t["through_interact"] = _tox_truth_through(0.33, rho00=0.05, eta3=5.0)
    t["through_low_rho00"] = _tox_truth_through(0.33, rho00=0.01, eta3=2.0)
    t["below_mild"] = _tox_truth_through(0.45, rho00=0.10, eta3=1.0)
    t["below_steep"] = _tox_truth_through(0.55, rho00=0.10, eta3=3.0)
    t["above_mild"] = _tox_truth_through(0.20, rho00=0.03, eta3=1.0)
    t["above_far"] = _tox_truth_through(0.12, rho00=0.02, eta3=1.0)
    t["above_interact"] = _tox_truth_through(0.18, rho00=0.03, eta3=6.0)
    t["asym_a_toxic"] = _tox_truth_through(0.33, rho00=0.05, eta3=1.0, skew=3.0)
    t["asym_b_toxic"] = _tox_truth_through(0.33, rho00=0.05, eta3=1.0, skew=1.0 / 3.0)
    t["asym_above"] = _tox_truth_through(0.22, rho00=0.03, eta3=2.0, skew=2.0)
    t["asym_below"] = _tox_truth_through(0.42, rho00=0.08, eta3=2.0, skew=0.5)
    return t


EXTREME_TOX_TRUTH = ToxParams(rho00=0.9, rho10=0.95, rho01=0.95, eta3=1.0)

_SPLINE_KNOTS = (0.4, 0.7)
TRUE_WEIBULL_SHAPE = 1.5

STAGE2_SHAPES = ("flat_null", "increasing", "decreasing", "mid_peak",
                 "edge_peak", "above_null")


def _median_profile(shape: str, med0: float, effect: float, z: np.ndarray) -> np.ndarray:
    if shape == "flat_null":
        return np.full_like(z, med0)
    if shape == "increasing":
        return med0 - 1.0 + (1.0 + effect) * z
    if shape == "decreasing":
        return med0 - 1.0 + (1.0 + effect) * (1.0 - z)
    if shape == "mid_peak":
        return med0 - 1.0 + (1.0 + effect) * np.exp(-(((z - 0.5) / 0.22) ** 2))
    if shape == "edge_peak":
        return med0 - 1.0 + (1.0 + effect) * np.exp(-(((z - 0.85) / 0.22) ** 2))
    if shape == "above_null":
        return med0 + effect * (0.4 + 2.4 * z * (1.0 - z))
    raise DomainError(f"unknown median shape {shape!r}")


def make_ttp_truth(shape: str, med0: float = 4.0, effect: float = 2.0,
                   k: float = TRUE_WEIBULL_SHAPE) -> TTPParams:
    """Spline TTP truth whose median profile follows the named shape, with
    maximum med0 + effect for the alternative shapes."""
    if shape == "flat_null":
        b0 = math.log(med0 / math.log(2.0) ** (1.0 / k))
        return TTPParams(beta=(b0, 0, 0, 0, 0, 0),
                         phi4=_SPLINE_KNOTS[0], phi5=_SPLINE_KNOTS[1], k=k)
    z = np.linspace(0.0, 1.0, 201)
    target = np.log(_median_profile(shape, med0, effect, z)
                    / math.log(2.0) ** (1.0 / k))
    phi4, phi5 = _SPLINE_KNOTS
    basis = np.column_stack([np.ones_like(z), z, z ** 2, z ** 3,
                             np.clip(z - phi4, 0.0, None) ** 3,
                             np.clip(z - phi5, 0.0, None) ** 3])
    beta, *_ = np.linalg.lstsq(basis, target, rcond=None)
    # pin the peak at exactly med0 + effect after the least-squares smooth
    fit_max = float(np.max(basis @ beta))
    want_max = float(np.max(target))
    beta[0] += want_max - fit_max
    return TTPParams(beta=tuple(beta), phi4=phi4, phi5=phi5, k=k)


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration: generative truths plus both stage
    configs and the replicate budget."""

    name: str
    true_tox: ToxParams
    ttp_shape: str
    effect_size: float
    accrual_rate: float = 1.0
    med0: float = 4.0
    replicates: int = 200
    stage1: Stage1Config = Stage1Config(prior=CALIBRATED_PRIOR_033)
    stage2: Stage2Config = Stage2Config()
    stage2_dlt_rate: float | None = None
    provenance: str = PROVENANCE

    def __post_init__(self):
        if self.replicates < 1:
            raise DomainError("replicates must be positive")
        if self.ttp_shape not in STAGE2_SHAPES:
            raise DomainError(f"unknown ttp shape {self.ttp_shape!r}")

    @property
    def is_null(self) -> bool:
        return self.ttp_shape == "flat_null"

    def ttp_truth(self) -> TTPParams:
        return make_ttp_truth(self.ttp_shape, self.med0, self.effect_size)

    def stage2_truth(self) -> Stage2Truth:
        return Stage2Truth(ttp=self.ttp_truth(), dlt_rate=self.stage2_dlt_rate)

    def with_overrides(self, **kw) -> "Scenario":
        """Campaign-level overrides (m, delta_u, delta_0, accrual_rate)."""
        sc = self
        if "m" in kw and kw["m"] is not None:
            sc = replace(sc, replicates=int(kw["m"]))
        if kw.get("delta_u") is not None:
            sc = replace(sc, stage2=replace(sc.stage2, delta_u=kw["delta_u"]))
        if kw.get("delta_0") is not None:
            sc = replace(sc, stage2=replace(sc.stage2, delta_0=kw["delta_0"]))
        if kw.get("accrual_rate") is not None:
            sc = replace(sc, accrual_rate=kw["accrual_rate"],
                         stage2=replace(sc.stage2,
                                        accrual_rate=kw["accrual_rate"]))
        return sc


def default_scenario(name: str = "through_mild__mid_peak",
                     effect: float = 2.0) -> Scenario:
    tox = stage1_truths()["through_mild"]
    return Scenario(name=name, true_tox=tox, ttp_shape="mid_peak",
                    effect_size=effect)


def shipped_scenarios() -> dict[str, Scenario]:
    """The scenario pack: every stage-1 truth crossed with the six median
    shapes at effect sizes 1.5 and 2 would be unwieldy, so the pack pairs
    each median shape with a representative stage-1 truth and both effect
    sizes, plus the dedicated stage-1-only truth set."""
    out: dict[str, Scenario] = {}
    tox = stage1_truths()
    pairings = [
        ("through_mild", "flat_null"),
        ("through_mild", "mid_peak"),
        ("through_interact", "increasing"),
        ("above_mild", "decreasing"),
        ("below_mild", "edge_peak"),
        ("through_low_rho00", "above_null"),
    ]
    for tox_name, shape in pairings:
        for effect in (1.5, 2.0):
            if shape == "flat_null" and effect != 2.0:
                continue
            name = f"{tox_name}__{shape}__e{effect:g}"
            out[name] = Scenario(name=name, true_tox=tox[tox_name],
                                 ttp_shape=shape,
                                 effect_size=0.0 if shape == "flat_null" else effect)
    return out
