"""Tests for the synthetic data generator and the bias statistics."""
import json
import math

import numpy as np
import pytest

from covid_monitor.bootstrap import (
    bias_estimate,
    bootstrap_stats,
    collapse_dynamic,
    interval_overlap_check,
    parametric_bootstrap,
    point_robustness,
    simulate_synthetic,
)
from covid_monitor.errors import MonitorError, SamplerError
from covid_monitor.model import A, D, E, H, I, PHI, R, STATIC_PARAMETERS, W, derive_fractions
from covid_monitor.priors import DYNAMIC_PARAMETERS, pack_point
from covid_monitor.sampler import AmConfig, PosteriorChain

from conftest import SYNTHETIC_IFR, schedule_for

STATE = [1000.0, 1000.0, 1000.0, 500.0, 100.0, 50.0, 0.0, 0.0]


def chain_of(samples, priors, n_windows=1, region="r") -> PosteriorChain:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    return PosteriorChain(names=priors.dimension_names(n_windows), samples=samples,
                          log_posterior=np.zeros(len(samples)), accepted=np.ones(len(samples), dtype=bool),
                          window_boundaries=schedule_for(28 * n_windows).window_boundaries, region_id=region)


def test_empty_population_stays_empty(mean_params):
    data = simulate_synthetic(mean_params, np.full(29, 0.2), schedule_for(30), 30, np.zeros(8), seed=0)
    assert np.all(data.states == 0)
    assert np.all(data.series.observations() == 0)


def test_zero_beta_means_no_new_exposures(mean_params):
    data = simulate_synthetic(mean_params, np.zeros(39), schedule_for(40), 40, STATE, seed=1)
    assert np.all(data.exposures == 0)
    assert np.all(np.diff(data.states[:, E]) <= 0), "E only drains without transmission"


def test_population_is_conserved(mean_params):
    data = simulate_synthetic(mean_params, np.full(59, 0.15), schedule_for(60), 60, STATE, seed=2)
    people = data.states[:, [I, A, E, H, W, D, R]].sum(axis=1)
    assert np.array_equal(people, people[0] + np.cumsum(data.exposures)), "Only new exposures add people"
    assert np.all(np.diff(data.series.D) >= 0), "Observed deaths never decrease"
    assert np.all(data.series.observations() >= 0)
    assert np.allclose(data.death_channels[-1].sum(), data.states[-1, D])


def test_one_step_mean_matches_exit_probabilities(mean_params):
    p = mean_params
    schedule = schedule_for(2)
    beta = 0.1
    draws = np.array([simulate_synthetic(p, [beta], schedule, 2, STATE, seed=k).states[1] for k in range(3000)])

    f = derive_fractions(p, SYNTHETIC_IFR)
    leave = {name: -math.expm1(-rate) for name, rate in
             (("I", p.gamma_I), ("A", p.gamma_A), ("E", p.sigma), ("H", p.gamma_H), ("W", p.gamma_W))}
    x = np.array(STATE)
    expected = {
        I: x[I] + x[E] * leave["E"] * f.F0 + x[A] * leave["A"] * f.F1 - x[I] * leave["I"],
        E: x[E] + beta * x[PHI] - x[E] * leave["E"],
        H: x[H] + x[I] * leave["I"] * f.F2 + x[W] * leave["W"] * (1 - f.F4) - x[H] * leave["H"],
        D: x[I] * leave["I"] * f.F2d + x[H] * leave["H"] * f.F3d + x[W] * leave["W"] * f.F4,
    }
    for index, value in expected.items():
        column = draws[:, index]
        se = column.std() / math.sqrt(len(column))
        assert abs(column.mean() - value) < 4 * se + 1e-9, f"State {index}: {column.mean():.3f} vs {value:.3f}"
    decay = math.exp(-p.rho)
    phi = decay * x[PHI] + (1 - decay) * (x[I] + p.theta_A_star * x[A] + p.theta_E_star * x[E])
    assert np.allclose(draws[:, PHI], phi), "phi follows its deterministic update"


def test_simulation_is_seeded(mean_params):
    a = simulate_synthetic(mean_params, np.full(29, 0.1), schedule_for(30), 30, STATE, seed=7)
    b = simulate_synthetic(mean_params, np.full(29, 0.1), schedule_for(30), 30, STATE, seed=7)
    c = simulate_synthetic(mean_params, np.full(29, 0.1), schedule_for(30), 30, STATE, seed=8)
    assert np.array_equal(a.series.observations(), b.series.observations())
    assert not np.array_equal(a.states, c.states)
    assert a.seed == {"entropy": 7, "spawn_key": []}


def test_simulation_argument_errors(mean_params):
    with pytest.raises(MonitorError):
        simulate_synthetic(mean_params, [0.1], schedule_for(5), 5, STATE)
    with pytest.raises(MonitorError):
        simulate_synthetic(mean_params, np.full(4, 0.1), schedule_for(5), 5, [1.0] * 7)


def test_synthetic_files(tmp_path, synthetic):
    path = synthetic.to_csv(tmp_path / "uppsala.csv")
    truth = json.loads((tmp_path / "uppsala.truth.json").read_text())
    assert truth["region_id"] == "uppsala"
    assert truth["r_t_per_window"] == [1.6, 0.9, 0.8]
    assert len(truth["beta"]) == len(synthetic.series) - 1
    assert path.read_text().startswith("date,region,hospital,icu,dead_cumulative,population")


def test_point_robustness():
    assert point_robustness(0.4, (0.0, 1.0))
    assert not point_robustness(1.0, (0.0, 1.0))
    assert not point_robustness(-0.5, (0.0, 1.0)), "Only the size of the bias matters"
    with pytest.raises(MonitorError):
        point_robustness(0.1, (1.0, 0.0))


def test_interval_overlap_check():
    assert not interval_overlap_check((0.0, 1.0), (0.5, 1.5), 0.68)
    assert interval_overlap_check((0.0, 1.0), (0.0, 1.0), 0.68)
    assert not interval_overlap_check((0.0, 1.0), (2.0, 3.0), 0.68)
    assert interval_overlap_check((0.0, 1.0), (0.5, 1.5), 0.3)
    assert interval_overlap_check((1.0, 1.0), (1.0, 1.0))


def test_bootstrap_stats_decomposition():
    rng = np.random.default_rng(0)
    values = rng.normal(5.0, 1.0, size=(1000, 3))
    stats = bootstrap_stats(values, [0.0, 0.0, 0.0])
    assert np.allclose(stats["NRMSE"], stats["CoV"]), "Without bias NRMSE is the coefficient of variation"

    bias = np.array([0.3, -1.2, 2.0])
    stats = bootstrap_stats(values, bias)
    assert np.allclose(stats["NRMSE"] ** 2, stats["CoV"] ** 2 + stats["CoB"] ** 2, rtol=0, atol=1e-12)

    constant = np.full((10, 1), 2.0)
    assert bootstrap_stats(constant, [2.0])["NRMSE"][0] == pytest.approx(1.0)


def test_bootstrap_stats_errors():
    with pytest.raises(MonitorError):
        bootstrap_stats(np.zeros((5, 1)), [0.0])
    with pytest.raises(SamplerError):
        bootstrap_stats(np.ones((5, 2)), [0.0])


def test_collapse_dynamic_averages_windows(priors):
    point = priors.mean_point(3)
    names = priors.dimension_names(3)
    for k, value in enumerate((1.0, 2.0, 3.0)):
        point[names.index(f"R_t[{k}]")] = value
    collapsed, collapsed_names = collapse_dynamic(point, names)
    assert collapsed_names == list(STATIC_PARAMETERS) + list(DYNAMIC_PARAMETERS)
    assert collapsed[0, collapsed_names.index("R_t")] == pytest.approx(2.0)


def test_bias_estimate_identical_and_shifted(priors):
    rng = np.random.default_rng(1)
    base = priors.mean_point(1) * (1 + 0.05 * rng.standard_normal((500, len(priors.dimension_names(1)))))
    reference = chain_of(base, priors)

    same = bias_estimate(reference, [chain_of(base, priors), chain_of(base.copy(), priors)])
    assert np.allclose(same.bias, 0.0)
    assert same.point_robust.all() and same.interval_robust.all()

    delta = 0.01
    shifted = bias_estimate(reference, [chain_of(base + delta, priors)])
    assert np.allclose(shifted.bias, delta)
    assert shifted.n_boot == 1
    assert set(shifted.medians()) == {"CoV", "CoB", "NRMSE"}
    assert list(shifted.to_frame().columns[:4]) == ["parameter", "mean", "sd", "bias"]


def test_bias_estimate_errors(priors):
    reference = chain_of(priors.mean_point(1)[None, :], priors)
    with pytest.raises(SamplerError):
        bias_estimate(reference, [])
    other = PosteriorChain(names=[f"x{k}" for k in range(reference.dim)], samples=reference.samples,
                           log_posterior=[0.0], accepted=[True], window_boundaries=reference.window_boundaries)
    with pytest.raises(SamplerError):
        bias_estimate(reference, [other])


def test_parametric_bootstrap_runs_end_to_end(priors, mean_params, synthetic):
    point = pack_point(mean_params, synthetic.schedule)
    reference = PosteriorChain(names=priors.dimension_names(synthetic.schedule.n_windows),
                               samples=np.tile(point, (5, 1)), log_posterior=np.zeros(5),
                               accepted=np.ones(5, dtype=bool),
                               window_boundaries=list(synthetic.schedule.window_boundaries),
                               region_id="uppsala")
    result = parametric_bootstrap(reference, synthetic.series, priors,
                                  am_cfg=AmConfig(n_samples=30, burn_in=10), n_boot=2, seed=5)
    assert len(result.datasets) == len(result.chains) == 2
    assert result.report.n_boot == 2
    assert len(result.beta) == len(synthetic.series) - 1
    assert result.datasets[0].series.region_id == "uppsala-boot0"
    assert all(len(chain) == 30 for chain in result.chains)
    assert np.all(np.isfinite(result.report.bias))
