"""Replicate execution and operating-characteristic aggregation.

Campaigns run m independent trials with per-replicate seeds derived from
the master seed by the documented splitmix64 rule, so results are
bit-identical for any degree of parallelism and any execution order.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import curve_distance_profile, estimate_power
from .model import MTDCurve, NoCurveError, mtd_curve
from .scenarios import Scenario
from .seeds import derive
from .stage1 import Stage1Result, run_stage1
from .stage2 import Stage2Result, Stage2Truth, run_stage2

ALLOCATION_BINS = 10


@dataclass(frozen=True)
class ReplicateOutcome:
    """Slim per-replicate summary shipped back from worker processes."""

    index: int
    stage1_dlt_rate: float | None
    stage1_stopped: bool
    est_curve: MTDCurve | None
    max_prob: float | None
    stage2_stop_reason: str | None
    stage2_n: int | None
    stage2_dlt_rate: float | None
    adaptive_z: tuple[float, ...]
    calendar_time: float | None


@dataclass(frozen=True)
class OperatingCharacteristics:
    """Aggregated campaign metrics; stage-specific blocks are None when
    that stage did not run."""

    scenario: str
    mode: str
    m: int
    master_seed: int
    # stage 1
    grid_x: list[float] | None = None
    grid_y: list[float] | None = None
    pointwise_bias: list[float] | None = None
    percent_selection_p10: list[float] | None = None
    percent_selection_p20: list[float] | None = None
    mean_dlt_rate: float | None = None
    sd_dlt_rate: float | None = None
    pct_trials_dlt_above: float | None = None
    n_safety_stopped: int | None = None
    n_curve_estimated: int | None = None
    # stage 2
    power: float | None = None
    type1: float | None = None
    reject_rate_08: float | None = None
    reject_rate_09: float | None = None
    type1_plus_type2: float | None = None
    early_stop_prob: float | None = None
    stop_reasons: dict[str, int] | None = None
    avg_sample_size: float | None = None
    avg_n_at_early_stop: float | None = None
    allocation_histogram: list[float] | None = None
    allocation_bin_edges: list[float] | None = None
    stage2_mean_dlt_rate: float | None = None
    mean_calendar_time: float | None = None
    max_probs: list[float] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OperatingCharacteristics":
        return cls(**json.loads(text))


def replicate_seed(master_seed: int, index: int) -> int:
    """The documented seed-splitting rule: splitmix64 folding of the
    replicate index into the master seed."""
    return derive(master_seed, index)


def run_replicate(scenario: Scenario, mode: str, index: int,
                  master_seed: int) -> ReplicateOutcome:
    """One full replicate in the requested mode.

    trial: stage 1 then stage 2 along the estimated curve; stage1/stage2:
    that stage alone (stage 2 runs along the true theta-contour).
    """
    seed = replicate_seed(master_seed, index)
    s1: Stage1Result | None = None
    s2: Stage2Result | None = None
    est_curve = None

    if mode in ("trial", "stage1"):
        s1 = run_stage1(scenario.true_tox, scenario.stage1, derive(seed, 101))
        est_curve = s1.curve
    if mode == "stage2":
        est_curve = mtd_curve(scenario.true_tox, scenario.stage1.theta)
    if mode in ("trial", "stage2") and est_curve is not None:
        s2 = run_stage2(est_curve, scenario.stage2_truth(), scenario.stage2,
                        derive(seed, 202))

    return ReplicateOutcome(
        index=index,
        stage1_dlt_rate=s1.dlt_rate if s1 else None,
        stage1_stopped=s1.stopped_for_safety if s1 else False,
        est_curve=est_curve if mode in ("trial", "stage1") else None,
        max_prob=s2.max_prob if s2 else None,
        stage2_stop_reason=s2.stop_reason if s2 else None,
        stage2_n=s2.n_enrolled if s2 else None,
        stage2_dlt_rate=s2.dlt_rate if s2 else None,
        adaptive_z=s2.adaptive_z if s2 else (),
        calendar_time=s2.calendar_time if s2 else None)


def _worker(args) -> ReplicateOutcome:
    scenario, mode, index, master_seed = args
    return run_replicate(scenario, mode, index, master_seed)


def default_parallelism() -> int:
    env = os.environ.get("COMBIDOSE_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def run_campaign(scenario: Scenario, parallelism: int | None = None,
                 master_seed: int = 0, mode: str = "trial") -> OperatingCharacteristics:
    """Run scenario.replicates independent trials and aggregate.

    Identical master_seed gives identical output for any parallelism; the
    aggregation consumes replicates in index order.
    """
    if mode not in ("trial", "stage1", "stage2"):
        raise ValueError(f"unknown mode {mode!r}")
    m = scenario.replicates
    workers = parallelism if parallelism else default_parallelism()
    jobs = [(scenario, mode, i, master_seed) for i in range(m)]
    if workers > 1 and m > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_worker, jobs,
                                     chunksize=max(1, m // (4 * workers))))
    else:
        outcomes = [_worker(j) for j in jobs]
    outcomes.sort(key=lambda o: o.index)
    return aggregate(scenario, mode, master_seed, outcomes)


def aggregate(scenario: Scenario, mode: str, master_seed: int,
              outcomes: list[ReplicateOutcome]) -> OperatingCharacteristics:
    m = len(outcomes)
    out: dict = {"scenario": scenario.name, "mode": mode, "m": m,
                 "master_seed": master_seed}

    if mode in ("trial", "stage1"):
        rates = [o.stage1_dlt_rate for o in outcomes if o.stage1_dlt_rate is not None]
        est = [o.est_curve for o in outcomes if o.est_curve is not None]
        out["n_safety_stopped"] = sum(o.stage1_stopped for o in outcomes)
        out["n_curve_estimated"] = len(est)
        if rates:
            arr = np.array(rates)
            out["mean_dlt_rate"] = float(arr.mean())
            out["sd_dlt_rate"] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            out["pct_trials_dlt_above"] = float(
                np.mean(arr > scenario.stage1.theta + 0.1))
        if est:
            true_curve = mtd_curve(scenario.true_tox, scenario.stage1.theta)
            gx, gy = true_curve.grid(101)
            profiles = np.stack([curve_distance_profile(true_curve, e, 101)
                                 for e in est])
            radius10 = 0.1 * np.hypot(gx, gy)
            radius20 = 0.2 * np.hypot(gx, gy)
            out["grid_x"] = [float(v) for v in gx]
            out["grid_y"] = [float(v) for v in gy]
            out["pointwise_bias"] = [float(v) for v in profiles.mean(axis=0)]
            out["percent_selection_p10"] = [
                float(v) for v in np.mean(np.abs(profiles) <= radius10, axis=0)]
            out["percent_selection_p20"] = [
                float(v) for v in np.mean(np.abs(profiles) <= radius20, axis=0)]

    if mode in ("trial", "stage2"):
        s2 = [o for o in outcomes if o.max_prob is not None]
        if s2:
            max_probs = [float(o.max_prob) for o in s2]
            out["max_probs"] = max_probs
            out["reject_rate_08"] = estimate_power(max_probs, 0.8)
            out["reject_rate_09"] = estimate_power(max_probs, 0.9)
            rate = estimate_power(max_probs, scenario.stage2.delta_u)
            if scenario.is_null:
                out["type1"] = rate
            else:
                out["power"] = rate
            reasons: dict[str, int] = {}
            for o in s2:
                reasons[o.stage2_stop_reason] = reasons.get(o.stage2_stop_reason, 0) + 1
            out["stop_reasons"] = reasons
            early = [o for o in s2 if o.stage2_stop_reason != "completed"]
            out["early_stop_prob"] = len(early) / len(s2)
            out["avg_sample_size"] = float(np.mean([o.stage2_n for o in s2]))
            if early:
                out["avg_n_at_early_stop"] = float(
                    np.mean([o.stage2_n for o in early]))
            out["stage2_mean_dlt_rate"] = float(
                np.mean([o.stage2_dlt_rate for o in s2]))
            out["mean_calendar_time"] = float(
                np.mean([o.calendar_time for o in s2]))
            pooled = [z for o in s2 for z in o.adaptive_z]
            if pooled:
                hist, edges = np.histogram(pooled, bins=ALLOCATION_BINS,
                                           range=(0.0, 1.0))
                out["allocation_histogram"] = [float(v) for v in
                                               hist / hist.sum()]
                out["allocation_bin_edges"] = [float(v) for v in edges]

    return OperatingCharacteristics(**out)


def pair_null_alt(null_oc: OperatingCharacteristics,
                  alt_oc: OperatingCharacteristics) -> OperatingCharacteristics:
    """Fill in type1 + (1 - power) for a matched null/alternative pair."""
    if null_oc.type1 is None or alt_oc.power is None:
        raise ValueError("need a null campaign and an alternative campaign")
    return OperatingCharacteristics(
        **{**asdict(alt_oc),
           "type1": null_oc.type1,
           "type1_plus_type2": null_oc.type1 + (1.0 - alt_oc.power)})
