"""Tests for the compartment model: fractions, transition matrix, R0 and CFR."""
import math
from datetime import timedelta

import numpy as np
import pytest

from covid_monitor.errors import InfeasibleParametersError, ModelError
from covid_monitor.model import (
    D,
    E,
    H,
    HOSP_MORT,
    LAMBDA0,
    PHI,
    R,
    SIR_MORT,
    CommuteNetwork,
    FractionSet,
    ParameterVector,
    beta_from_r0,
    build_transition_matrix,
    cfr,
    derive_fractions,
    make_windows,
    marginal_mortality,
    network_phi_update,
    r0_from_beta,
    r0_phi,
    with_beta,
)
from covid_monitor.priors import prior_sample

from conftest import START


def simulate_fates(f: FractionSet, start: str, n: int, rng: np.random.Generator) -> float:
    """Share of ``n`` individuals starting in ``start`` who end up dead."""
    where = np.full(n, {"I": 0, "H": 1, "W": 2}[start])
    dead = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    while active.any():
        u = rng.random(n)
        in_i = active & (where == 0)
        in_h = active & (where == 1)
        in_w = active & (where == 2)

        die = in_i & (u < f.F2d)
        to_h = in_i & (u >= f.F2d) & (u < f.F2d + f.F2)
        dead |= die
        active &= ~(in_i & ~to_h)
        where[to_h] = 1

        die = in_h & (u < f.F3d)
        to_w = in_h & (u >= f.F3d) & (u < f.F3d + f.F3)
        dead |= die
        active &= ~(in_h & ~to_w)
        where[to_w] = 2

        die = in_w & (u < f.F4)
        dead |= die
        active &= ~die
        where[in_w & ~die] = 1
    return float(dead.mean())


REPORTED = ParameterVector(sigma=0.16, gamma_I=0.14, gamma_H=0.112, gamma_W=0.082, E2I=0.75,
                           HOSP=0.038, IC_HOSP=0.112, theta_E_star=1.0, theta_A_star=1.0, tau_half=0.2)


def reported_fractions() -> FractionSet:
    return derive_fractions(REPORTED, 0.0067)


def test_parameter_vector_rejects_invalid_values(mean_params):
    with pytest.raises(ModelError):
        mean_params.with_values(sigma=0.0)
    with pytest.raises(ModelError):
        mean_params.with_values(HOSP=1.5)
    with pytest.raises(ModelError):
        mean_params.with_values(theta_E_star=-0.1)


def test_parameter_vector_array_round_trip(mean_params):
    restored = ParameterVector.from_array(mean_params.to_array())
    assert restored == mean_params, "Static parameters should survive to_array/from_array"
    assert mean_params.gamma_A == mean_params.gamma_I, "gamma_A is tied to gamma_I"


def test_derive_fractions_constants(mean_params):
    f = derive_fractions(mean_params, 0.007)
    assert f.F3d == pytest.approx(SIR_MORT * HOSP_MORT, abs=1e-12)
    assert f.F3d == pytest.approx(0.02814538, abs=1e-8), "F3d = SIR_MORT * HOSP_MORT"
    assert f.F4 == SIR_MORT
    assert f.F1 == 0.0, "A2I defaults to zero"


def test_derive_fractions_clamps_small_ifr(mean_params):
    f = derive_fractions(mean_params, 0.0)
    assert f.F2d == 0.0, "The I -> D share is clamped at zero"


def test_derive_fractions_infeasible(mean_params):
    p = mean_params.with_values(HOSP=0.99, E2I=0.05)
    with pytest.raises(InfeasibleParametersError):
        derive_fractions(p, 0.9)


def test_derive_fractions_rejects_ifr_outside_unit_interval(mean_params):
    with pytest.raises(ModelError):
        derive_fractions(mean_params, 1.5)


def test_transition_matrix_conserves_individuals(mean_params):
    f = derive_fractions(mean_params, 0.007)
    F = build_transition_matrix(mean_params, f, 0.1)
    # Shedding into phi and infection out of phi do not move individuals
    people = [i for i in range(F.shape[0]) if i != PHI]
    for col in people:
        assert F[people, col].sum() == pytest.approx(1.0, abs=1e-12), f"Column {col} must conserve mass"
    assert F[E, PHI] == 0.1
    assert F[D, D] == 1.0 and F[R, R] == 1.0, "Cumulative states are absorbing"
    assert np.all(F >= 0), "Transition entries are nonnegative"


def test_with_beta_changes_only_infection_entry(mean_params):
    f = derive_fractions(mean_params, 0.007)
    F = build_transition_matrix(mean_params, f, 0.1)
    G = with_beta(F, 0.3)
    assert G[E, PHI] == 0.3
    G[E, PHI] = 0.1
    assert np.array_equal(F, G), "Only the transmission entry may differ"


def test_r0_factor_at_prior_means(mean_params):
    f = derive_fractions(mean_params, 0.0067)
    factor = r0_from_beta(mean_params, f, 1.0)
    assert abs(factor - 13.2) < 0.05, f"R0 factor at prior means should be about 13.2, got {factor}"


def test_r0_round_trip_over_prior_draws(priors):
    rng = np.random.default_rng(7)
    windows = make_windows(START, START)
    for _ in range(1000):
        p, schedule = prior_sample(priors, rng, windows)
        f = derive_fractions(p, min(schedule.ifr_per_window[0], 0.005))
        beta = rng.uniform(0.01, 1.0)
        assert beta_from_r0(p, f, r0_from_beta(p, f, beta)) == pytest.approx(beta, rel=1e-12, abs=1e-15)


def test_r0_phi():
    assert r0_phi(13.2) == pytest.approx(3.6332, abs=1e-4)
    for x in (0.0, 0.5, 1.0, 2.7, 16.0):
        assert r0_phi(x) ** 2 == pytest.approx(x, abs=1e-12)
    with pytest.raises(ModelError):
        r0_phi(-1.0)


def test_cfr_trivial_cases():
    assert cfr(FractionSet(0.75, 0, 0.05, 0.0, 0.1, 0.03, 1.0), "W") == 1.0, "F4=1 means certain death"
    assert cfr(FractionSet(0.75, 0, 0.05, 0.0, 0.0, 0.0, 0.2), "H") == 0.0, "No deaths from H"
    with pytest.raises(ModelError):
        cfr(FractionSet(0.75, 0, 0.05, 0.0, 0.1, 0.03, 0.2), "E")


def test_cfr_matches_fate_simulation():
    rng = np.random.default_rng(42)
    n = 400_000
    for f in (reported_fractions(), FractionSet(0.7, 0.0, 0.3, 0.1, 0.4, 0.1, 0.3)):
        for compartment in ("I", "H", "W"):
            expected = cfr(f, compartment)
            observed = simulate_fates(f, compartment, n, rng)
            se = math.sqrt(max(expected * (1 - expected), 1e-12) / n)
            assert abs(observed - expected) < 4 * se, \
                f"CFR_{compartment}: closed form {expected:.5f}, simulation {observed:.5f}"


def test_cfr_at_reported_fractions():
    f = reported_fractions()
    assert cfr(f, "H") == pytest.approx(0.0570, abs=5e-4)
    assert 0.25 <= cfr(f, "W") <= 0.45, "CFR_W should lie in [25%, 45%]"


def test_cfr_monotone_in_death_and_hospital_shares():
    base = dict(F0=0.75, F1=0.0, F2=0.05, F2d=0.002, F3=0.1, F3d=0.03, F4=0.2)
    for name in ("F2d", "F2"):
        values = [cfr(FractionSet(**{**base, name: v}), "I") for v in np.linspace(0.0, 0.3, 11)]
        assert np.all(np.diff(values) >= -1e-15), f"CFR_I should not decrease in {name}"


def test_marginal_mortality_sums_to_cfr_i():
    f = reported_fractions()
    shares = marginal_mortality(REPORTED, f)
    assert sum(shares.values()) == pytest.approx(cfr(f, "I"), abs=1e-12)


def test_network_update_hand_example():
    net = CommuteNetwork(D=np.array([[0.0, 0.1], [0.2, 0.0]]), lam=1.0, regions=("a", "b"))
    out = network_phi_update(np.array([1.0, 1.0]), net, np.array([1.0, 1.0]))
    assert np.allclose(out, [0.9, 1.1])


def test_network_update_without_coupling():
    phi_bar = np.array([3.0, 4.0])
    no_lambda = CommuteNetwork(D=np.array([[0.0, 0.5], [0.5, 0.0]]), lam=0.0, regions=("a", "b"))
    no_commute = CommuteNetwork(D=np.zeros((2, 2)), lam=1.0, regions=("a", "b"))
    assert np.array_equal(network_phi_update([1.0, 2.0], no_lambda, phi_bar), phi_bar)
    assert np.array_equal(network_phi_update([1.0, 2.0], no_commute, phi_bar), phi_bar)
    with pytest.raises(ModelError):
        network_phi_update([-1.0, 2.0], no_commute, phi_bar)


def test_make_windows():
    assert make_windows(START, START) == (START,)
    windows = make_windows(START, START + timedelta(days=56))
    assert windows == (START, START + timedelta(days=28), START + timedelta(days=56))
    with pytest.raises(ModelError):
        make_windows(START, START - timedelta(days=1))


def test_commute_network_from_csv(tmp_path):
    path = tmp_path / "commute.csv"
    path.write_text("region,a,b\na,0,0.1\nb,0.2,0\n")
    net = CommuteNetwork.from_csv(str(path))
    assert net.regions == ["a", "b"]
    assert net.lam == LAMBDA0
    assert np.allclose(net.d, [0.2, 0.1]), "d holds the column sums"

    path.write_text("region,a,b\na,0,0.1\nc,0.2,0\n")
    with pytest.raises(ModelError):
        CommuteNetwork.from_csv(str(path))
