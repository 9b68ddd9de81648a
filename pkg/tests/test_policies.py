import numpy as np
import pytest

from adaptive_lqr.dynamics import NoiseModel, PerturbationConfig, SystemSpec, epoch_of, update_times
from adaptive_lqr.errors import ConfigurationError, NumericalError
from adaptive_lqr.estimation import ConstraintSet
from adaptive_lqr.harness import ExperimentConfig, run_experiment
from adaptive_lqr.metrics import identification_error
from adaptive_lqr.policies import (
    OptimalPolicy,
    PerturbedGreedyPolicy,
    RCEPolicy,
    TSPolicy,
    bootstrap_stabilizer,
    make_policy,
    optimal_input,
    simulate,
    ts_row_covariance,
)
from adaptive_lqr.riccati import CostPair, DynamicsPair
from adaptive_lqr.seeding import streams

# first column of L(theta0) for the 3x3 preset, from scipy's DARE solver
EQ11_L_COL0 = np.array([0.31247562214406177, -0.7220138604958503, -0.17694906137733282])


def run(spec, kind, seed=0, n=500, **kw):
    rngs = streams(seed)
    boot = bootstrap_stabilizer(spec, 17, rngs["bootstrap"])
    pol = make_policy(kind, spec, rngs, bootstrap=boot, **kw)
    noise = rngs["noise"].standard_normal((n, spec.p))
    return pol, simulate(spec, pol, noise, record_times=[n])


def test_optimal_input_examples(eq11_spec):
    np.testing.assert_array_equal(optimal_input(np.zeros(3), eq11_spec.L_star), 0)
    np.testing.assert_array_equal(optimal_input(np.ones(3), np.zeros((3, 3))), 0)
    np.testing.assert_allclose(optimal_input([1, 0, 0], eq11_spec.L_star), EQ11_L_COL0, atol=1e-9)


def test_optimal_gain_never_changes(eq11_spec):
    pol = OptimalPolicy(eq11_spec.L_star)
    noise = np.random.default_rng(0).standard_normal((50, 3))
    tr = simulate(eq11_spec, pol, noise).trajectory
    assert np.all(tr.gains == eq11_spec.L_star)
    assert np.all(tr.v == 0)


def test_gain_changes_only_at_update_times(eq11_spec):
    _, sim = run(eq11_spec, "perturbed_greedy", n=2000)
    G = sim.trajectory.gains
    changed = {t for t in range(1, len(G)) if not np.array_equal(G[t], G[t - 1])}
    assert changed <= set(update_times(1.2, 2000))
    assert len(changed) > 10


def test_perturbation_within_epoch_bound(eq11_spec):
    pol, sim = run(eq11_spec, "perturbed_greedy", n=3000)
    cfg = pol.perturbation
    norms = np.linalg.norm(sim.trajectory.v, axis=1)
    bounds = np.array([cfg.bound(epoch_of(t, cfg.gamma)) for t in range(len(norms))])
    assert np.all(norms < bounds)
    assert bounds[-1] < bounds[100]


def test_trajectory_bounded_seed0(eq11_spec):
    _, sim = run(eq11_spec, "perturbed_greedy", n=1000)
    assert np.isfinite(sim.trajectory.x).all()
    assert np.linalg.norm(sim.trajectory.x, axis=1).max() < 1e3


class _Pinned:
    """Mixin: every estimate is the true parameter."""

    theta0 = None

    def _estimate(self, t):
        return self.theta0.copy()


def _pinned(cls, theta0):
    return type("Pinned" + cls.__name__, (_Pinned, cls), {"theta0": theta0})


def test_collapse_to_optimal_bitwise(eq11_spec):
    spec = eq11_spec
    noise = np.random.default_rng(7).standard_normal((300, 3))
    ref = simulate(spec, OptimalPolicy(spec.L_star), noise).trajectory
    p, r, cost, th0 = spec.p, spec.r, spec.cost, spec.theta0.theta
    rng = np.random.default_rng(1)
    pols = [
        _pinned(PerturbedGreedyPolicy, th0)(cost, p, r, spec.L_star, PerturbationConfig(kappa=0.0), rng),
        _pinned(RCEPolicy, th0)(cost, p, r, spec.L_star, rng, sigma=0.0),
        _pinned(TSPolicy, th0)(cost, p, r, spec.L_star, rng, posterior_scale=0.0),
    ]
    for pol in pols:
        tr = simulate(spec, pol, noise).trajectory
        np.testing.assert_array_equal(tr.u, ref.u)
        np.testing.assert_array_equal(tr.x, ref.x)


def test_restricted_with_no_constraint_matches_greedy(eq11_spec):
    _, a = run(eq11_spec, "perturbed_greedy", seed=3, n=800)
    _, b = run(eq11_spec, "restricted_greedy", seed=3, n=800, constraint=ConstraintSet(),
               perturbation=PerturbationConfig(mode="algorithm1"))
    np.testing.assert_array_equal(a.trajectory.u, b.trajectory.u)


def test_restricted_known_B0_block(eq11_spec):
    pol, sim = run(eq11_spec, "restricted_greedy", n=500)
    np.testing.assert_array_equal(sim.estimates[500][:, 3:], eq11_spec.theta0.B)
    assert pol.perturbation.mode == "restricted"


def test_restricted_error_not_worse_than_unrestricted(eq11_spec):
    # same perturbation law for both, so only the estimator differs
    n, spec = 10_000, eq11_spec
    cfg = PerturbationConfig(mode="algorithm1")
    errs = {}
    for kind in ("perturbed_greedy", "restricted_greedy"):
        vals = []
        for i in range(20):
            rngs = streams(i)
            boot = bootstrap_stabilizer(spec, 17, rngs["bootstrap"])
            pol = make_policy(kind, spec, rngs, bootstrap=boot, perturbation=cfg)
            sim = simulate(spec, pol, rngs["noise"].standard_normal((n, 3)), record_times=[n])
            vals.append(identification_error(sim.estimates[n], spec.theta0.theta))
        errs[kind] = np.median(vals)
    assert errs["restricted_greedy"] <= errs["perturbed_greedy"]


def test_rce_zero_sigma_is_certainty_equivalence(eq11_spec):
    pol, sim = run(eq11_spec, "rce", n=300, sigma_rce=0.0)
    assert pol.randomization_scale(100) == 0
    ce, sim_ce = run(eq11_spec, "rce", n=300, sigma_rce=0.0)
    np.testing.assert_array_equal(sim.trajectory.u, sim_ce.trajectory.u)
    assert np.all(sim.trajectory.v == 0)


def test_rce_scale_decays(eq11_spec):
    pol = RCEPolicy(eq11_spec.cost, 3, 3, eq11_spec.L_star, np.random.default_rng(0))
    assert pol.randomization_scale(10**8) == pytest.approx(0.01)
    assert pol.randomization_scale(10) > pol.randomization_scale(1000)


def test_ts_row_covariance_formula():
    np.testing.assert_allclose(ts_row_covariance(np.eye(3), 1.0, 1.0), 0.5 * np.eye(3))
    np.testing.assert_array_equal(ts_row_covariance(np.eye(2), 0.0), 0)


def test_bootstrap_noiseless_exact():
    theta = DynamicsPair([[0.5, 0.2], [0.0, 0.8]], [[1.0], [0.5]])
    spec = SystemSpec(theta, CostPair(np.eye(2), np.eye(1)))
    res = bootstrap_stabilizer(spec, 5, np.random.default_rng(0), noise_model=NoiseModel(covariance=np.zeros((2, 2))))
    assert not res.fallback
    np.testing.assert_allclose(res.gain, spec.L_star, atol=1e-8)


def test_bootstrap_fallback_rate(eq11_spec):
    flags = [bootstrap_stabilizer(eq11_spec, 17, streams(s)["bootstrap"]).fallback for s in range(100)]
    assert np.mean(flags) < 0.2


def test_bootstrap_escalates_on_weak_input():
    # unstable mode reachable only through a tiny input gain
    theta = DynamicsPair([[1.05, 0.0], [0.0, 0.3]], [[0.02], [1.0]])
    spec = SystemSpec(theta, CostPair(np.eye(2), np.eye(1)))
    rounds = [bootstrap_stabilizer(spec, 3, streams(s)["bootstrap"]).rounds for s in range(20)]
    assert max(rounds) > 1


def test_bootstrap_needs_enough_samples(eq11_spec):
    with pytest.raises(ConfigurationError):
        bootstrap_stabilizer(eq11_spec, 5, np.random.default_rng(0))


def test_divergence_guard():
    theta = DynamicsPair([[1.5]], [[1.0]])
    spec = SystemSpec(theta, CostPair([[1.0]], [[1.0]]))
    pol = OptimalPolicy([[0.0]])
    with pytest.raises(NumericalError):
        simulate(spec, pol, np.ones((200, 1)))


def test_unknown_kind(eq11_spec):
    with pytest.raises(ConfigurationError):
        make_policy("ofu", eq11_spec, streams(0))


def test_no_divergent_replicate_over_20_seeds():
    cfg = ExperimentConfig.from_dict({"horizon": 10_000, "replicates": 20, "record_every": 0})
    res = run_experiment(cfg)
    assert max(r.diagnostics["max_state_norm"] for r in res) < 1e3
