import math

import numpy as np
import pytest
from scipy.stats import beta as beta_dist

from combidose.mcmc import (
    Identity,
    InitializationError,
    Log,
    Logit,
    MCMCConfig,
    PosteriorChain,
    median,
    quantile,
    sample,
)


def batch_se(x, n_batches=25):
    """Monte Carlo standard error of the mean by batch means."""
    n = len(x) // n_batches * n_batches
    means = x[:n].reshape(n_batches, -1).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


def test_standard_normal_target():
    cfg = MCMCConfig(burn_in=2000, keep=5000, seed=42)
    chain = sample(lambda v: -0.5 * v[0] ** 2, [Identity()], cfg, init=[0.5])
    x = chain.draws[:, 0]
    assert abs(x.mean()) < 3 * batch_se(x)
    assert x.var() == pytest.approx(1.0, rel=0.1)
    assert all(0.0 < r < 1.0 for r in chain.acceptance_rates)


def test_beta_3_2_target_with_logit_transform():
    def logdens(v):
        p = v[0]
        if not 0 < p < 1:
            return -math.inf
        return 2.0 * math.log(p) + math.log1p(-p)

    cfg = MCMCConfig(burn_in=2000, keep=5000, seed=1)
    chain = sample(logdens, [Logit()], cfg, init=[0.5])
    assert chain.draws[:, 0].mean() == pytest.approx(0.6, abs=0.02)


def test_uniform_target_quantile():
    cfg = MCMCConfig(burn_in=1000, keep=5000, seed=3)
    chain = sample(lambda v: 0.0 if 0 < v[0] < 1 else -math.inf, [Logit()], cfg, init=[0.4])
    assert quantile(chain, 0, 0.25) == pytest.approx(0.25, abs=0.02)


def test_same_seed_gives_bit_identical_chains():
    cfg = MCMCConfig(burn_in=500, keep=500, seed=99)
    f = lambda v: -0.5 * (v[0] ** 2 + (v[1] - 1.0) ** 2)
    a = sample(f, [Identity(), Identity()], cfg, init=[0.0, 0.0])
    b = sample(f, [Identity(), Identity()], cfg, init=[0.0, 0.0])
    assert np.array_equal(a.draws, b.draws)
    assert a.acceptance_rates == b.acceptance_rates


def test_conjugate_beta_bernoulli_recovery():
    # 7 successes in 10 trials with Beta(2,2) prior -> posterior Beta(9,5)
    successes, n = 7, 10

    def logdens(v):
        p = v[0]
        if not 0 < p < 1:
            return -math.inf
        return (successes + 1) * math.log(p) + (n - successes + 1) * math.log1p(-p)

    cfg = MCMCConfig(burn_in=2000, keep=5000, seed=5)
    chain = sample(logdens, [Logit()], cfg, init=[0.5])
    x = chain.draws[:, 0]
    want = beta_dist.mean(9, 5)
    assert abs(x.mean() - want) < 3 * batch_se(x)


def test_log_transform_samples_gamma():
    # Gamma(3, rate 2): mean 1.5
    def logdens(v):
        t = v[0]
        if t <= 0:
            return -math.inf
        return 2.0 * math.log(t) - 2.0 * t

    cfg = MCMCConfig(burn_in=2000, keep=5000, seed=8)
    chain = sample(logdens, [Log()], cfg, init=[1.0])
    x = chain.draws[:, 0]
    assert abs(x.mean() - 1.5) < 4 * batch_se(x)


def test_initialization_error():
    cfg = MCMCConfig(burn_in=100, keep=100, seed=0)
    with pytest.raises(InitializationError):
        sample(lambda v: -math.inf, [Identity()], cfg, init=[0.0])


def test_config_validation():
    with pytest.raises(ValueError):
        MCMCConfig(keep=10)
    with pytest.raises(ValueError):
        MCMCConfig(adapt_target=1.5)


def test_quantile_order_statistics():
    draws = np.arange(1.0, 101.0).reshape(-1, 1)
    chain = PosteriorChain(draws=draws, acceptance_rates=(0.5,), seed=0,
                           param_names=("a",))
    assert quantile(chain, 0, 0.5) == pytest.approx(50.5)
    const = PosteriorChain(draws=np.full((200, 1), 3.25), acceptance_rates=(0.5,),
                           seed=0, param_names=("a",))
    for q in (0.1, 0.5, 0.9):
        assert quantile(const, 0, q) == pytest.approx(3.25)
    assert median(const, 0) == pytest.approx(3.25)
    with pytest.raises(ValueError):
        quantile(chain, 0, 1.5)


def test_chain_csv_dump(tmp_path):
    draws = np.arange(8.0).reshape(4, 2)
    chain = PosteriorChain(draws=draws, acceptance_rates=(0.4, 0.5), seed=1,
                           param_names=("alpha", "beta"))
    path = tmp_path / "chain.csv"
    chain.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "alpha,beta"
    assert len(lines) == 5
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.allclose(back, draws)
