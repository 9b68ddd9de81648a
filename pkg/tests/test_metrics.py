import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_lqr.errors import ConfigurationError, IntegrityError
from adaptive_lqr.metrics import (
    closed_form_decomposition,
    coupled_regret,
    decomposition_check,
    identification_error,
    normalizers,
    optimal_costs,
    telescoping_oracle,
    rate_normalizations,
)
from adaptive_lqr.policies import OptimalPolicy, bootstrap_stabilizer, make_policy, simulate
from adaptive_lqr.seeding import streams

from conftest import random_spec


def greedy_trace(spec, seed, n):
    rngs = streams(seed)
    boot = bootstrap_stabilizer(spec, 2 * spec.q, rngs["bootstrap"])
    pol = make_policy("perturbed_greedy", spec, rngs, bootstrap=boot)
    noise = rngs["noise"].standard_normal((n, spec.p))
    return simulate(spec, pol, noise, seed=seed).trajectory


def test_optimal_policy_has_zero_regret(eq11_spec):
    noise = np.random.default_rng(0).standard_normal((200, 3))
    run = coupled_regret(eq11_spec, OptimalPolicy(eq11_spec.L_star), noise)
    assert np.all(run.regret == 0)
    assert all(math.isnan(r.est_err_sq) for r in run.records)


def test_unperturbed_linear_at_optimum_zero_regret(eq11_spec):
    rngs = streams(1)
    pol = make_policy("perturbed_linear", eq11_spec, rngs, v_scale=0.0)
    run = coupled_regret(eq11_spec, pol, rngs["noise"].standard_normal((200, 3)))
    np.testing.assert_array_equal(run.regret, 0)


def test_normalizations_undefined_below_three(eq11_spec):
    noise = np.random.default_rng(0).standard_normal((5, 3))
    run = coupled_regret(eq11_spec, OptimalPolicy(eq11_spec.L_star), noise)
    assert [math.isnan(r.norm_regret_thm3) for r in run.records] == [True, True, False, False, False]


def test_telescoping_single_step(eq11_spec):
    tr = greedy_trace(eq11_spec, 0, 1)
    direct = tr.cost.sum() - optimal_costs(eq11_spec, tr.w).sum()
    assert telescoping_oracle(eq11_spec, tr) == pytest.approx(direct, rel=1e-12)


def test_telescoping_optimal_is_zero(eq11_spec):
    noise = np.random.default_rng(0).standard_normal((40, 3))
    tr = simulate(eq11_spec, OptimalPolicy(eq11_spec.L_star), noise).trajectory
    assert telescoping_oracle(eq11_spec, tr) == 0


def test_closed_form_all_zero_at_optimum(eq11_spec):
    noise = np.random.default_rng(0).standard_normal((40, 3))
    tr = simulate(eq11_spec, OptimalPolicy(eq11_spec.L_star), noise).trajectory
    terms = closed_form_decomposition(eq11_spec, tr)
    assert (terms.phi, terms.zeta, terms.xi, terms.psi, terms.martingale) == (0, 0, 0, 0, 0)


def test_closed_form_optimal_gain_with_perturbation(eq11_spec):
    rngs = streams(2)
    pol = make_policy("perturbed_linear", eq11_spec, rngs, v_scale=0.5)
    tr = simulate(eq11_spec, pol, rngs["noise"].standard_normal((100, 3))).trajectory
    terms = closed_form_decomposition(eq11_spec, tr)
    assert terms.psi == 0
    assert terms.phi == 0
    assert terms.zeta > 0
    assert terms.total == pytest.approx(telescoping_oracle(eq11_spec, tr), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_property_oracle_identities(seed):
    spec = random_spec(seed)
    tr = greedy_trace(spec, seed, 300)
    chk = decomposition_check(spec, tr, seed)
    d, tele = chk["direct"], chk["telescoping"]
    assert abs(tele - d) <= 1e-8 * (1 + abs(d))
    assert abs(chk["terms"].total - tele) <= 1e-6 * (1 + abs(tele))


def test_cross_term_factor_is_two():
    spec = random_spec(11)
    tr = greedy_trace(spec, 11, 200)
    terms = closed_form_decomposition(spec, tr)
    tele = telescoping_oracle(spec, tr)
    halved = terms.total - terms.xi / 2
    assert abs(terms.xi) > 1e-3 * abs(tele)
    assert abs(halved - tele) > 1e3 * abs(terms.total - tele)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_property_zeta_bound_and_signs(seed):
    spec = random_spec(seed)
    tr = greedy_trace(spec, seed, 150)
    terms = closed_form_decomposition(spec, tr)
    B, K, R = spec.theta0.B, spec.optimal.K, spec.cost.R
    lam = np.linalg.eigvalsh(B.T @ K @ B + R).max()
    assert 0 <= terms.zeta <= lam * np.sum(tr.v**2) * (1 + 1e-12)
    assert terms.psi >= 0


def test_psi_matches_quadratic_form():
    spec = random_spec(4)
    tr = greedy_trace(spec, 4, 120)
    B, K, R, L = spec.theta0.B, spec.optimal.K, spec.cost.R, spec.L_star
    M = B.T @ K @ B + R
    direct = sum((G - L) @ x @ M @ ((G - L) @ x) for G, x in zip(tr.gains, tr.x[:-1]))
    assert closed_form_decomposition(spec, tr).psi == pytest.approx(direct, rel=1e-10)


def test_oracle_seed_mismatch(eq11_spec):
    tr = greedy_trace(eq11_spec, 5, 20)
    with pytest.raises(IntegrityError):
        telescoping_oracle(eq11_spec, tr, seed=6)


def test_oracle_detects_tampered_trace(eq11_spec):
    tr = greedy_trace(eq11_spec, 5, 20)
    bad = dataclasses.replace(tr, w=tr.w.copy())
    bad.w[3] += 1.0
    with pytest.raises(IntegrityError):
        telescoping_oracle(eq11_spec, bad)


def test_identification_error_examples():
    th = np.arange(12.0).reshape(3, 4)
    assert identification_error(th, th) == 0
    d = np.zeros((3, 4))
    d[0, 0] = 3
    assert identification_error(th + d, th) == pytest.approx(3)
    u, v = np.array([0.6, 0.8, 0.0]), np.array([0.0, 1.0, 0.0, 0.0])
    assert identification_error(th + np.outer(u, v), th) == pytest.approx(1)
    with pytest.raises(ConfigurationError):
        identification_error(th, th.T)


def test_normalizer_examples():
    n = math.e**2
    d = normalizers(n, alpha=2.0, delta=1.0)
    assert d["regret_thm3"] == pytest.approx(math.e * 4)
    assert d["error_thm3"] == pytest.approx(1 / math.e)
    b = normalizers(1000.0, alpha=math.inf)
    assert b["regret_thm3"] == pytest.approx(math.sqrt(1000) * math.log(1000) ** 2)
    assert b["error_thm3"] == pytest.approx(1000**-0.5 / math.log(1000))
    heavy = normalizers(1000.0, alpha=1.0)
    assert heavy["regret_thm3"] == pytest.approx(math.sqrt(1000) * math.log(1000) ** 4)


def test_rate_normalizations_gaussian_matches_plot_axes():
    out = rate_normalizations(10_000, 5.0, 0.01)
    assert out["norm_regret_thm3"] == pytest.approx(5.0 / (100 * math.log(10_000) ** 2))
    assert out["norm_err_thm3"] == pytest.approx(100 * 0.01)
    assert out["norm_regret_thm4"] == pytest.approx(5.0 / math.log(10_000) ** 3)
