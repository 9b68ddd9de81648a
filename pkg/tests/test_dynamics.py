import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_lqr.dynamics import (
    NoiseModel,
    PerturbationConfig,
    SystemSpec,
    epoch_of,
    epoch_schedule,
    sample_noise,
    sample_noise_block,
    sample_perturbation,
    stage_costs,
    step,
    update_times,
)
from adaptive_lqr.errors import ConfigurationError
from adaptive_lqr.riccati import CostPair, DynamicsPair


def test_step_zero():
    spec = SystemSpec(DynamicsPair(np.eye(2) * 0.5, np.eye(2)), CostPair(np.eye(2), np.eye(2)))
    x, c = step(spec, np.zeros(2), np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(x, 0)
    assert c == 0


def test_step_identity_dynamics_cost_is_Q11():
    spec = SystemSpec(DynamicsPair(np.eye(2) * 0.99, np.ones((2, 1))), CostPair(np.diag([3.0, 1.0]), np.eye(1)))
    x, c = step(spec, [1.0, 0.0], [0.0], [0.0, 0.0])
    assert c == 3.0
    np.testing.assert_allclose(x, [0.99, 0.0])


def test_step_eq11_first_columns(eq11_spec):
    x, _ = step(eq11_spec, [1, 0, 0], [1, 0, 0], [0, 0, 0])
    np.testing.assert_allclose(x, [-0.70, -2.32, 0.02], atol=1e-12)


def test_stage_costs_match_step(eq11_spec):
    rng = np.random.default_rng(0)
    X, U = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    ref = [step(eq11_spec, x, u, np.zeros(3))[1] for x, u in zip(X, U)]
    np.testing.assert_allclose(stage_costs(eq11_spec, X, U), ref, rtol=1e-14)


def test_epoch_of_gamma2():
    assert [epoch_of(t, 2.0) for t in (0, 1, 3)] == [0, 1, 2]


def test_update_times_examples():
    assert update_times(2.0, 10) == [1, 2, 4, 8]
    assert update_times(10.0, 5) == [1]
    # enumerated floor(1.2^m), deduplicated
    assert update_times(1.2, 20) == [1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 15, 18]


def test_epoch_schedule_matches_epoch_of():
    sched = epoch_schedule(1.2, 300)
    assert list(sched) == [epoch_of(t, 1.2) for t in range(301)]


@settings(max_examples=30, deadline=None)
@given(gamma=st.floats(1.05, 4.0), n=st.integers(1, 2000))
def test_property_epochs_monotone_and_change_at_update_times(gamma, n):
    sched = epoch_schedule(gamma, n)
    assert sched[0] == 0
    assert np.all(np.diff(sched) >= 0)
    changes = {t for t in range(1, n + 1) if sched[t] != sched[t - 1]}
    assert changes == set(update_times(gamma, n))


def test_noise_zero_covariance():
    model = NoiseModel(covariance=np.zeros((2, 2)))
    np.testing.assert_array_equal(sample_noise(model, 1, np.random.default_rng(0)), 0)


def test_gaussian_noise_covariance():
    model = NoiseModel.isotropic(3)
    W = sample_noise_block(model, 1, 100_000, np.random.default_rng(1))
    assert np.linalg.norm(np.cov(W.T) - np.eye(3), 2) < 0.05


def test_truncated_noise_bound():
    model = NoiseModel.isotropic(3, family="truncated_gaussian", bound=1.5)
    W = sample_noise_block(model, 1, 100_000, np.random.default_rng(2))
    assert np.linalg.norm(W, axis=1).max() <= 1.5


def test_weibull_noise_unit_covariance():
    model = NoiseModel.isotropic(2, family="symmetric_weibull_tail", alpha=1.0)
    assert model.tail_exponent == 1.0
    W = sample_noise_block(model, 1, 200_000, np.random.default_rng(3))
    assert np.abs(W.mean(axis=0)).max() < 0.02
    assert np.linalg.norm(np.cov(W.T) - np.eye(2), 2) < 0.06


def test_heteroscedastic_schedule():
    model = NoiseModel(covariance=[np.eye(2), 3 * np.eye(2)])
    assert not model.is_constant
    np.testing.assert_array_equal(model.covariance_at(1), np.eye(2))
    np.testing.assert_array_equal(model.covariance_at(2), 3 * np.eye(2))
    assert model.min_eig_time_average(4) == pytest.approx(2.0)


def test_noise_validation():
    with pytest.raises(ConfigurationError):
        NoiseModel(family="cauchy", covariance=np.eye(2))
    with pytest.raises(ConfigurationError):
        NoiseModel(family="truncated_gaussian", covariance=np.eye(2))
    with pytest.raises(ConfigurationError):
        NoiseModel(covariance=-np.eye(2))


def test_perturbation_zero_kappa_gives_zero():
    cfg = PerturbationConfig(kappa=0.0)
    np.testing.assert_array_equal(sample_perturbation(cfg, 5, 3, np.random.default_rng(0)), 0)


def test_perturbation_feasibility_checks():
    with pytest.raises(ConfigurationError):
        PerturbationConfig(gamma=1.0)
    with pytest.raises(ConfigurationError):
        PerturbationConfig(c_low=4.0, c_high=10.0).validate(3)
    report = PerturbationConfig().validate(3)
    assert report["acceptance"] > 0.5
    assert report["kappa"] > 1


def test_perturbation_design_epoch5():
    cfg = PerturbationConfig()
    m, r, n = 5, 3, 100_000
    V = sample_perturbation(cfg, m, r, np.random.default_rng(4), size=n)
    assert np.linalg.norm(V, axis=1).max() < cfg.bound(m)
    scale = m ** -2 * cfg.gamma ** (m / 2)
    assert scale * cfg.bound(m) ** 2 < cfg.c_high
    lam = np.linalg.eigvalsh(V.T @ V / n).min()
    # sd of a sample variance of a bounded variable, generous
    se = np.sqrt(2.0 / n) * cfg.covariance(m, r)[0, 0]
    assert scale * (lam + 3 * se) > cfg.c_low


def test_perturbation_exact_covariance_matches_target():
    cfg = PerturbationConfig()
    for m in (1, 7, 30):
        s = m * m * cfg.gamma ** (-m / 2)
        assert cfg.covariance(m, 3)[0, 0] == pytest.approx(cfg.rho_lo * cfg.c_low * s, rel=1e-9)


def test_perturbation_decays():
    cfg = PerturbationConfig()
    assert cfg.bound(1000) < 1e-10 * cfg.bound(10)


def test_restricted_mode_scale():
    cfg = PerturbationConfig(mode="restricted")
    for m in (3, 10):
        assert cfg.gamma ** m * cfg.bound(m) ** 2 < cfg.c_high
        V = sample_perturbation(cfg, m, 3, np.random.default_rng(m), size=1000)
        assert np.linalg.norm(V, axis=1).max() < cfg.bound(m)


def test_perturbation_deterministic():
    cfg = PerturbationConfig()
    a = sample_perturbation(cfg, 3, 2, np.random.default_rng(9), size=50)
    b = sample_perturbation(cfg, 3, 2, np.random.default_rng(9), size=50)
    np.testing.assert_array_equal(a, b)


def test_epoch_zero_uses_m_eff_one():
    cfg = PerturbationConfig()
    assert cfg.bound(0) == cfg.bound(1)
    assert math.isfinite(cfg.pre_variance(0, 3))
