import math

import numpy as np
import pytest
from scipy.stats import kstest

from combidose.mcmc import MCMCConfig, PosteriorChain
from combidose.model import (
    DomainError,
    Stage2Record,
    ToxParams,
    TTPParams,
    TTPPriorConfig,
    mtd_curve,
)
from combidose.scenarios import make_ttp_truth
from combidose.stage2 import (
    ProbCurve,
    Stage2Config,
    Stage2Truth,
    export_stage2_csv,
    fit_stage2,
    futility_stop,
    optimal_dose,
    prob_exceed_curve,
    rejection_sample_doses,
    run_stage2,
    toxicity_monitor,
)

PNAMES = ("b0", "b1", "b2", "b3", "b4", "b5", "phi4", "phi5", "k")
CURVE = mtd_curve(ToxParams(0.05, 0.3, 0.3, 10.0), 0.33)


def chain_with_constant_median(values, k=1.0):
    """One draw per requested constant-in-z median value."""
    rows = []
    for med in values:
        b0 = math.log(med / math.log(2.0) ** (1.0 / k))
        rows.append([b0, 0, 0, 0, 0, 0, 0.4, 0.7, k])
    return PosteriorChain(draws=np.array(rows), acceptance_rates=(0.3,) * 9,
                          seed=0, param_names=PNAMES)


def test_prob_exceed_constant_chains():
    all6 = chain_with_constant_median([6.0] * 50)
    pc = prob_exceed_curve(all6, 4.0)
    assert np.all(pc.probs == 1.0)
    half = chain_with_constant_median([3.0] * 50 + [5.0] * 50)
    pc = prob_exceed_curve(half, 4.0)
    assert np.all(pc.probs == 0.5)


def test_prob_exceed_matches_counting_oracle():
    rng = np.random.default_rng(3)
    rows = np.column_stack([
        rng.normal(1.5, 0.3, 200), rng.normal(0, 0.5, 200),
        rng.normal(0, 0.5, 200), rng.normal(0, 0.5, 200),
        rng.normal(0, 0.5, 200), rng.normal(0, 0.5, 200),
        rng.uniform(0.1, 0.45, 200), rng.uniform(0.55, 0.9, 200),
        rng.uniform(0.8, 2.5, 200)])
    chain = PosteriorChain(draws=rows, acceptance_rates=(0.3,) * 9, seed=0,
                           param_names=PNAMES)
    grid = np.linspace(0.0, 1.0, 21)
    pc = prob_exceed_curve(chain, 4.0, grid)
    from combidose.model import weibull_median
    for gi, z in enumerate(grid):
        count = 0
        for row in rows:
            p = TTPParams(beta=tuple(row[:6]), phi4=row[6], phi5=row[7], k=row[8])
            count += weibull_median(p, float(z)) > 4.0
        assert pc.probs[gi] == pytest.approx(count / 200.0, abs=1e-12)


def test_optimal_dose_argmax_and_ties():
    pc = ProbCurve(grid=np.array([0.0, 0.5, 1.0]), probs=np.array([0.2, 0.9, 0.4]))
    assert optimal_dose(pc) == 0.5
    flat = ProbCurve(grid=np.array([0.0, 0.5, 1.0]), probs=np.array([0.4, 0.4, 0.4]))
    assert optimal_dose(flat) == 0.0
    tie = ProbCurve(grid=np.array([0.0, 0.5, 1.0]), probs=np.array([0.3, 0.9, 0.9]))
    assert optimal_dose(tie) == 0.5


def test_futility_rule_boundary():
    grid = np.linspace(0, 1, 5)
    assert futility_stop(ProbCurve(grid=grid, probs=np.full(5, 0.05)), 0.10) is True
    assert futility_stop(ProbCurve(grid=grid, probs=np.array([0.0, 0.0, 0.5, 0.0, 0.0])), 0.20) is False
    assert futility_stop(ProbCurve(grid=grid, probs=np.full(5, 0.10)), 0.10) is False


def test_toxicity_monitor_beta_binomial():
    recs0 = [Stage2Record(z=0.5, time=1.0, delta=1, dlt=0) for _ in range(10)]
    assert toxicity_monitor(recs0, 0.33, 0.1, 0.8) is False
    recs8 = ([Stage2Record(z=0.5, time=1.0, delta=1, dlt=1) for _ in range(8)]
             + [Stage2Record(z=0.5, time=1.0, delta=1, dlt=0) for _ in range(2)])
    assert toxicity_monitor(recs8, 0.33, 0.1, 0.8) is True
    assert toxicity_monitor([], 0.33, 0.1, 0.8) is False


def test_rejection_sampler_constant_target_is_uniform():
    rng = np.random.default_rng(5)
    draws = rejection_sample_doses(np.full(1001, 5.0), 5000, rng)
    assert kstest(draws, "uniform").pvalue > 0.01


def test_rejection_sampler_linear_target_cdf():
    rng = np.random.default_rng(7)
    target = np.linspace(0.0, 1.0, 1001)  # density g(z) ∝ z, CDF z^2
    draws = rejection_sample_doses(target, 5000, rng)
    stat = kstest(draws, lambda v: np.asarray(v) ** 2).statistic
    assert stat < 0.03


def test_rejection_sampler_determinism_and_stats():
    chain = chain_with_constant_median(np.linspace(2, 8, 100))
    a = rejection_sample_doses(chain, 50, np.random.default_rng(11))
    b = rejection_sample_doses(chain, 50, np.random.default_rng(11))
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))

    target = np.linspace(0.0, 1.0, 1001)
    draws, stats = rejection_sample_doses(target, 20000,
                                          np.random.default_rng(13),
                                          return_stats=True)
    # acceptance rate must match mean(target) / (1.01 * max(target))
    want = 0.5 / 1.01
    got = stats["accepted"] / stats["proposed"]
    assert got == pytest.approx(want, abs=3 * math.sqrt(want * (1 - want) / stats["proposed"]))


def test_rejection_sampler_rejects_bad_target():
    with pytest.raises(DomainError):
        rejection_sample_doses(np.array([1.0, np.nan, 2.0]), 5, np.random.default_rng(0))
    with pytest.raises(DomainError):
        rejection_sample_doses(np.zeros(11), 5, np.random.default_rng(0))


FAST_MCMC = MCMCConfig(burn_in=600, keep=300)


def test_run_stage2_deterministic():
    truth = Stage2Truth(ttp=make_ttp_truth("mid_peak", 4.0, 2.0))
    cfg = Stage2Config(mcmc=FAST_MCMC)
    a = run_stage2(CURVE, truth, cfg, seed=3)
    b = run_stage2(CURVE, truth, cfg, seed=3)
    assert a.records == b.records
    assert a.max_prob == b.max_prob
    assert a.adaptive_z == b.adaptive_z


def test_run_stage2_structure_invariants():
    truth = Stage2Truth(ttp=make_ttp_truth("increasing", 4.0, 2.0))
    cfg = Stage2Config(mcmc=FAST_MCMC)
    res = run_stage2(CURVE, truth, cfg, seed=9)
    assert res.n_enrolled <= cfg.n_max
    zs = [r.z for r in res.records]
    assert np.allclose(zs[:cfg.n1], np.linspace(0, 1, cfg.n1))
    assert all(0.0 <= z <= 1.0 for z in zs)
    assert all(0.0 < r.time <= cfg.followup_cap + 1e-12 for r in res.records)
    enrolls = [r.enroll_time for r in res.records]
    assert enrolls == sorted(enrolls)
    # delta=1 means the recorded time is the generated event time
    for rec, ev in zip(res.records, res.true_event_times):
        if rec.delta == 1:
            assert rec.time == pytest.approx(ev, rel=1e-12)
        else:
            assert rec.time <= ev


def test_run_stage2_monotone_decision():
    truth = Stage2Truth(ttp=make_ttp_truth("mid_peak", 4.0, 2.0))
    cfg = Stage2Config(mcmc=FAST_MCMC)
    res = run_stage2(CURVE, truth, cfg, seed=21)
    if res.max_prob > 0.9:
        assert res.max_prob > 0.8


def test_run_stage2_toxic_truth_stops():
    truth = Stage2Truth(ttp=make_ttp_truth("flat_null", 4.0, 0.0), dlt_rate=0.8)
    cfg = Stage2Config(mcmc=FAST_MCMC)
    stops = 0
    for s in range(6):
        res = run_stage2(CURVE, truth, cfg, seed=40 + s)
        stops += res.stop_reason == "toxicity"
    assert stops >= 5


def test_run_stage2_futile_truth_stops():
    # medians one month under the null everywhere: futility should fire often
    truth = Stage2Truth(ttp=make_ttp_truth("flat_null", 1.0, 0.0))
    cfg = Stage2Config(mcmc=FAST_MCMC, delta_0=0.20)
    stops = 0
    for s in range(6):
        res = run_stage2(CURVE, truth, cfg, seed=60 + s)
        stops += res.stop_reason == "futility"
    assert stops >= 4


def test_stage2_csv_export(tmp_path):
    truth = Stage2Truth(ttp=make_ttp_truth("mid_peak", 4.0, 2.0))
    res = run_stage2(CURVE, truth, Stage2Config(mcmc=FAST_MCMC), seed=3)
    path = tmp_path / "s2.csv"
    export_stage2_csv(res, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "patient_id,cohort,z,raw_x,raw_y,enroll_time,time,event,dlt"
    assert len(lines) == res.n_enrolled + 1
