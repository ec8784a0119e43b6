import math

import numpy as np
import pytest

from combidose.mcmc import MCMCConfig, PosteriorChain
from combidose.model import (
    DomainError,
    Stage1Record,
    ToxParams,
    ToxPriorConfig,
    prob_dlt,
)
from combidose.seeds import derive
from combidose.stage1 import (
    Stage1Config,
    Stage1Engine,
    alpha_schedule,
    calibrate_prior,
    export_stage1_csv,
    fit_stage1,
    next_dose_x_given_y,
    next_dose_y_given_x,
    prior_mean_dlt,
    run_stage1,
    safety_stop,
)

PNAMES = ("rho00", "rho10", "rho01", "eta3")


def chain_from_rows(rows):
    return PosteriorChain(draws=np.asarray(rows, dtype=float),
                          acceptance_rates=(0.3,) * 4, seed=0,
                          param_names=PNAMES)


def test_alpha_schedule_endpoints_and_midpoint():
    cfg = Stage1Config()
    assert alpha_schedule(0, cfg) == pytest.approx(0.25)
    assert alpha_schedule(15, cfg) == pytest.approx(0.50)
    assert alpha_schedule(6, cfg) == pytest.approx(0.35)
    assert alpha_schedule(30, cfg) == pytest.approx(0.50)
    sched = [alpha_schedule(n, cfg) for n in range(31)]
    assert all(b >= a for a, b in zip(sched, sched[1:]))
    assert max(sched) == 0.5
    with pytest.raises(DomainError):
        alpha_schedule(31, cfg)


def test_next_dose_point_mass_posterior():
    # single-draw chain whose theta-contour passes through (0.5, y)
    params = (0.05, 0.3, 0.3, 10.0)
    lt, l00, l01 = (math.log(0.3 / 0.7), math.log(0.05 / 0.95),
                    math.log(0.3 / 0.7))
    dx = l01 - l00
    y = (lt - l00 - 0.5 * dx) / (dx + 10.0 * 0.5)   # solve for x*=0.5
    chain = chain_from_rows([params])
    for alpha in (0.1, 0.25, 0.5, 0.9):
        assert next_dose_x_given_y(chain, y, alpha, 0.3) == pytest.approx(0.5, abs=1e-12)


def test_next_dose_two_draw_median_interpolates():
    # rho10 chosen so the conditional MTD at y=0 is exactly 0.2 and 0.6
    def rho10_for(c, theta=0.3, rho00=0.05):
        l00 = math.log(rho00 / (1 - rho00))
        lt = math.log(theta / (1 - theta))
        return 1.0 / (1.0 + math.exp(-(l00 + (lt - l00) / c)))

    chain = chain_from_rows([(0.05, rho10_for(0.2), 0.3, 1.0),
                             (0.05, rho10_for(0.6), 0.3, 1.0)])
    assert next_dose_x_given_y(chain, 0.0, 0.5, 0.3) == pytest.approx(0.4, abs=1e-9)


def test_next_dose_monotone_in_alpha_and_brute_force_oracle():
    rng = np.random.default_rng(31)
    data = [Stage1Record(x=float(x), y=float(y), dlt=int(d))
            for x, y, d in zip(rng.uniform(0, 1, 12), rng.uniform(0, 1, 12),
                               rng.integers(0, 2, 12))]
    chain = fit_stage1(data, ToxPriorConfig(), MCMCConfig(burn_in=1000, keep=500),
                       seed=3)
    theta, y = 0.33, 0.4
    got = [next_dose_x_given_y(chain, y, a, theta) for a in (0.1, 0.25, 0.5, 0.9)]
    assert all(b >= a - 1e-12 for a, b in zip(got, got[1:]))

    # brute-force oracle: per-draw grid solve of prob_dlt(x, y) = theta
    xs = np.linspace(0.0, 1.0, 4001)
    solved = []
    for row in chain.draws:
        p = prob_dlt(ToxParams(*row), xs, np.full_like(xs, y))
        if p[0] >= theta:
            solved.append(0.0)
        elif p[-1] <= theta:
            solved.append(1.0)
        else:
            solved.append(float(np.interp(theta, p, xs)))
    for a, g in zip((0.1, 0.25, 0.5, 0.9), got):
        assert g == pytest.approx(float(np.quantile(solved, a)), abs=0.02)


def test_next_dose_rejects_empty_chain():
    empty = PosteriorChain(draws=np.empty((0, 4)), acceptance_rates=(0.3,) * 4,
                           seed=0, param_names=PNAMES)
    with pytest.raises(DomainError):
        next_dose_x_given_y(empty, 0.5, 0.25, 0.33)


def test_safety_stop_fractions():
    cfg = Stage1Config()
    hot = chain_from_rows([(0.5, 0.8, 0.8, 1.0)] * 100)
    cold = chain_from_rows([(0.05, 0.4, 0.4, 1.0)] * 100)
    assert safety_stop(hot, 0.33, cfg) is True
    assert safety_stop(cold, 0.33, cfg) is False
    mixed = chain_from_rows([(0.5, 0.8, 0.8, 1.0)] * 85
                            + [(0.05, 0.4, 0.4, 1.0)] * 15)
    assert safety_stop(mixed, 0.33, cfg) is True


def test_run_stage1_is_deterministic():
    truth = ToxParams(rho00=0.05, rho10=0.35, rho01=0.35, eta3=2.0)
    cfg = Stage1Config(mcmc=MCMCConfig(burn_in=500, keep=200))
    a = run_stage1(truth, cfg, seed=17)
    b = run_stage1(truth, cfg, seed=17)
    assert a.records == b.records
    assert a.est_params == b.est_params
    c = run_stage1(truth, cfg, seed=18)
    assert a.records != c.records


def test_run_stage1_structure_and_overdose_control():
    truth = ToxParams(rho00=0.05, rho10=0.4, rho01=0.45, eta3=2.0)
    cfg = Stage1Config(mcmc=MCMCConfig(burn_in=800, keep=400))
    res = run_stage1(truth, cfg, seed=5)
    assert res.n_enrolled <= cfg.n_max
    assert all(0 <= r.x <= 1 and 0 <= r.y <= 1 for r in res.records)
    cohorts = [row["cohort"] for row in res.rows]
    assert cohorts == sorted(cohorts)
    for c in set(cohorts):
        assert cohorts.count(c) == 2
    # first cohort at the default 15/75 start
    assert res.rows[0]["x"] == pytest.approx(1 / 3) and res.rows[0]["y"] == 0.5
    assert res.rows[1]["raw_x"] == pytest.approx(15.0)


def test_overdose_control_quantile_property():
    # after refit, the fraction of posterior conditional MTDs strictly below
    # the recommended dose cannot exceed alpha (quantile definition)
    truth = ToxParams(rho00=0.05, rho10=0.4, rho01=0.45, eta3=2.0)
    cfg = Stage1Config(mcmc=MCMCConfig(burn_in=800, keep=500))
    eng = Stage1Engine(cfg, seed=23)
    rng = np.random.default_rng(derive(23, 0))
    doses = list(eng.first_cohort())
    from combidose.stage1 import _conditional_mtd_x, _conditional_mtd_y
    for cohort in range(5):
        outs = [Stage1Record(d.x, d.y, int(rng.random() < prob_dlt(truth, d.x, d.y)))
                for d in doses]
        eng.record_outcomes(outs)
        chain = eng.refit()
        if eng.state.stopped_for_safety:
            break
        d1, d2, alpha = eng.next_cohort()
        mtd_x = _conditional_mtd_x(chain.draws, d1.y, cfg.theta)
        mtd_y = _conditional_mtd_y(chain.draws, d2.x, cfg.theta)
        assert np.mean(mtd_x < d1.x) <= alpha + 0.02
        assert np.mean(mtd_y < d2.y) <= alpha + 0.02
        doses = [d1, d2]


def test_safety_stop_under_extreme_truth_small_batch():
    # full 200-run version lives in the acceptance suite
    extreme = ToxParams(rho00=0.9, rho10=0.95, rho01=0.95, eta3=1.0)
    cfg = Stage1Config(prior=ToxPriorConfig(a3=4.0, b3=1.0, a=1.0, b=2.0),
                       mcmc=MCMCConfig(burn_in=1000, keep=500))
    hits = 0
    for s in range(8):
        r = run_stage1(extreme, cfg, seed=100 + s)
        hits += (r.stopped_for_safety and r.n_enrolled <= 6)
    assert hits >= 6


def test_calibrate_prior_hits_target_mean():
    cal = calibrate_prior(0.33, n_draws=8000, seed=11)
    assert prior_mean_dlt(cal, 1 / 3, 0.5, n_draws=8000, seed=11) == pytest.approx(0.33, abs=0.005)
    assert cal.b1 == cal.b2


def test_csv_export(tmp_path):
    truth = ToxParams(rho00=0.05, rho10=0.35, rho01=0.35, eta3=2.0)
    cfg = Stage1Config(n_max=6, mcmc=MCMCConfig(burn_in=300, keep=150))
    res = run_stage1(truth, cfg, seed=3)
    path = tmp_path / "s1.csv"
    export_stage1_csv(res, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "patient_id,cohort,x,y,raw_x,raw_y,dlt,alpha"
    assert len(lines) == res.n_enrolled + 1
