"""Tests for the Adaptive Metropolis sampler, chain persistence and diagnostics."""
import math
from datetime import timedelta

import numpy as np
import pytest

from covid_monitor.bootstrap import collapse_dynamic
from covid_monitor.errors import SamplerError
from covid_monitor.priors import PriorDescriptor, PriorSet, pack_point
from covid_monitor.sampler import (
    EMPTY_SERIES_START,
    AmConfig,
    PosteriorChain,
    am_run,
    gelman_rubin,
    gelman_rubin_all,
    posterior_summary,
    pooled_samples,
    run_chains,
    warm_start_points,
)

from conftest import START, constant_series

TARGET_MEAN = np.array([5.0, 4.0])
TARGET_COV = np.array([[1.0, 0.5], [0.5, 2.0]])


def two_dimensional_priors(priors: PriorSet) -> PriorSet:
    """Everything fixed except one R_t and one IFR window, both flat on [0, 12]."""
    static = {name: PriorDescriptor.point_mass(d.mean()) for name, d in priors.static.items()}
    flat = PriorDescriptor(kind="uniform", lower=0.0, upper=12.0)
    return PriorSet(static=static, dynamic={"R_t": flat, "IFR": flat})


def gaussian_loglik(point: np.ndarray) -> float:
    x = point[-2:] - TARGET_MEAN
    return -0.5 * float(x @ np.linalg.solve(TARGET_COV, x))


def zero_loglik(point: np.ndarray) -> float:
    return 0.0


def make_chain(samples, names=None, region="r", boundaries=None) -> PosteriorChain:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    names = names or [f"x{k}" for k in range(samples.shape[1])]
    n = len(samples)
    return PosteriorChain(names=names, samples=samples, log_posterior=np.zeros(n),
                          accepted=np.ones(n, dtype=bool), window_boundaries=boundaries or [START],
                          region_id=region)


def test_chain_samples_prior_without_data(priors):
    cfg = AmConfig(n_chains=2, n_samples=6000, burn_in=1000, s=2.4 ** 2 / 12)
    chains = run_chains(priors, constant_series(0), cfg, seed=3, loglik_fn=zero_loglik)
    pooled = PosteriorChain.pool(chains)
    assert pooled.window_boundaries == [EMPTY_SERIES_START]
    assert pooled.names[-2:] == ["R_t[0]", "IFR[0]"]
    for name, descriptor in zip(pooled.names, priors.descriptors(1)):
        if descriptor.is_point_mass:
            continue
        gap = abs(pooled.column(name).mean() - descriptor.mean())
        assert gap < 0.35 * descriptor.std(), f"{name}: chain mean misses the prior mean by {gap:.4g}"


def test_chain_recovers_gaussian_moments(priors):
    cfg = AmConfig(n_samples=20_000, burn_in=2_000, s=2.4 ** 2 / 2)
    chain = am_run(two_dimensional_priors(priors), constant_series(0), cfg, seed=1, loglik_fn=gaussian_loglik)
    values = chain.samples[:, -2:]
    assert np.allclose(values.mean(axis=0), TARGET_MEAN, atol=0.15)
    assert np.allclose(np.cov(values.T), TARGET_COV, atol=0.3)
    assert 0.05 < chain.acceptance_rate < 0.9
    # Fixed coordinates never move
    assert np.all(chain.samples[:, :-2] == chain.samples[0, :-2])


def test_frozen_adaptation_keeps_initial_proposal(priors):
    cfg = AmConfig(n_samples=400, burn_in=100, t0=math.inf, checkpoint_every=100, c0_scale=0.01)
    chain = am_run(two_dimensional_priors(priors), constant_series(0), cfg, seed=2, loglik_fn=gaussian_loglik)
    assert len(chain.cov_checkpoints) == 5
    for _, cov in chain.cov_checkpoints:
        assert np.allclose(cov, 0.01 * 144.0 * np.eye(2)), "Without adaptation the proposal stays c0"


def test_adaptation_changes_proposal(priors):
    cfg = AmConfig(n_samples=2000, burn_in=0, checkpoint_every=1000)
    chain = am_run(two_dimensional_priors(priors), constant_series(0), cfg, seed=2, loglik_fn=gaussian_loglik)
    assert not np.allclose(chain.cov_checkpoints[-1][1], cfg.c0_scale * 144.0 * np.eye(2))


def test_same_seed_same_chain(priors):
    cfg = AmConfig(n_samples=300, burn_in=50)
    a = am_run(priors, constant_series(0), cfg, seed=9, loglik_fn=zero_loglik)
    b = am_run(priors, constant_series(0), cfg, seed=9, loglik_fn=zero_loglik)
    c = am_run(priors, constant_series(0), cfg, seed=10, loglik_fn=zero_loglik)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert a.seed == {"entropy": 9, "spawn_key": []}


def test_run_chains_uses_independent_streams(priors):
    cfg = AmConfig(n_chains=3, n_samples=100, burn_in=10)
    chains = run_chains(priors, constant_series(0), cfg, seed=4, loglik_fn=zero_loglik)
    assert len(chains) == 3
    assert not np.array_equal(chains[0].samples, chains[1].samples)
    assert [c.seed["spawn_key"] for c in chains] == [[0], [1], [2]]


def test_initial_point_outside_support_is_rejected(priors):
    point = priors.mean_point(1)
    point[0] = 10.0
    with pytest.raises(SamplerError):
        am_run(priors, constant_series(0), AmConfig(n_samples=10, burn_in=0), seed=0,
               initial=point, loglik_fn=zero_loglik)


def test_warm_start_shortens_burn_in(priors):
    cfg = AmConfig(n_samples=50, burn_in=500, warm_start_burn_in=20)
    chain = am_run(priors, constant_series(0), cfg, seed=0, initial=priors.mean_point(1),
                   warm_start=True, loglik_fn=zero_loglik)
    assert chain.burn_in == 20
    assert len(chain) == 50


def test_warm_start_points_extend_windows(priors):
    windows = [START, START + timedelta(days=28)]
    names = priors.dimension_names(2)
    point = priors.mean_point(2)
    point[names.index("R_t[1]")] = 0.8
    point[names.index("IFR[1]")] = 0.004
    stored = make_chain([point], names=names, boundaries=windows)

    new_windows = windows + [START + timedelta(days=56)]
    (start,) = warm_start_points([stored], priors, new_windows)
    new_names = priors.dimension_names(3)
    assert start[new_names.index("R_t[2]")] == 0.8, "A new window inherits the latest stored window"
    assert start[new_names.index("IFR[2]")] == 0.004
    assert np.array_equal(start[:10], point[:10])


def test_chain_csv_keeps_samples(tmp_path, priors):
    chain = am_run(priors, constant_series(0), AmConfig(n_samples=50, burn_in=10, checkpoint_every=20),
                   seed=5, loglik_fn=zero_loglik)
    path = chain.to_csv(tmp_path / "r_chain0.csv", extra={"rhat": [1.0]})
    restored = PosteriorChain.from_csv(path)
    assert restored.names == chain.names
    assert np.allclose(restored.samples, chain.samples, rtol=1e-9, atol=0)
    assert restored.acceptance_rate == chain.acceptance_rate
    assert restored.window_boundaries == chain.window_boundaries
    assert (tmp_path / "r_chain0.json").exists()


def test_pool_rejects_mismatched_chains():
    with pytest.raises(SamplerError):
        PosteriorChain.pool([make_chain(np.zeros((3, 2))), make_chain(np.zeros((3, 3)))])
    with pytest.raises(SamplerError):
        PosteriorChain.pool([])


def test_gelman_rubin_identical_chains():
    values = np.random.default_rng(0).normal(size=200)
    n = len(values)
    assert gelman_rubin([values, values.copy()], 0) == pytest.approx(math.sqrt((n - 1) / n))


def test_gelman_rubin_mixed_and_separated():
    rng = np.random.default_rng(1)
    mixed = [rng.normal(size=10_000) for _ in range(4)]
    assert gelman_rubin(mixed, 0) < 1.05
    separated = [rng.normal(0, 1, 1000), rng.normal(100, 1, 1000)]
    assert gelman_rubin(separated, 0) > 1.1
    assert np.all(gelman_rubin_all([np.column_stack([m, m]) for m in mixed]) < 1.05)


def test_gelman_rubin_errors():
    with pytest.raises(SamplerError):
        gelman_rubin([np.zeros(10)], 0)
    with pytest.raises(SamplerError):
        gelman_rubin([np.zeros(10), np.zeros(9)], 0)
    assert gelman_rubin([np.ones(10), np.ones(10)], 0) == math.inf


def test_summary_of_repeated_point():
    summary = posterior_summary([np.full(100, 2.5)])
    row = summary.loc["x0"]
    assert row["lo95"] == row["hi95"] == row["mean"] == 2.5
    assert row["sd"] == 0.0


def test_summary_of_uniform_samples():
    values = np.random.default_rng(2).uniform(size=200_000)
    row = posterior_summary([values]).loc["x0"]
    assert abs(row["lo95"] - 0.025) < 0.003 and abs(row["hi95"] - 0.975) < 0.003
    assert abs(row["lo68"] - 0.16) < 0.005 and abs(row["median"] - 0.5) < 0.005


def test_population_weighted_summary():
    a, b = 1.0, 4.0
    summary = posterior_summary([np.full(10, a), np.full(50, b)], weights=[2.0, 1.0])
    assert summary.loc["x0", "mean"] == pytest.approx((2 * a + b) / 3)


def test_pooled_samples_follow_weights():
    draws = pooled_samples([np.zeros(100), np.ones(100)], weights=[3.0, 1.0], n=40_000, seed=0)
    assert abs(draws.mean() - 0.25) < 0.01


def test_credible_intervals_cover_simulation_truth(priors, mean_params, synthetic):
    truth = pack_point(mean_params, synthetic.schedule)
    cfg = AmConfig(n_chains=2, n_samples=3000, warm_start_burn_in=500, checkpoint_every=1000)
    chains = run_chains(priors, synthetic.series, cfg, seed=11, initial=[truth],
                        window_boundaries=synthetic.schedule.window_boundaries)
    names = chains[0].names
    samples, collapsed_names = collapse_dynamic(np.vstack([c.samples for c in chains]), names)
    true_values, _ = collapse_dynamic(truth[None, :], names)
    summary = posterior_summary([samples], names=collapsed_names)

    assert len(collapsed_names) == 12
    inside = (summary["lo68"].to_numpy() <= true_values[0]) & (true_values[0] <= summary["hi68"].to_numpy())
    missed = [n for n, ok in zip(collapsed_names, inside) if not ok]
    assert inside.sum() >= 7, f"68% intervals miss the truth in {missed}"
