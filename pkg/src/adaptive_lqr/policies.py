"""Linear-feedback policies ``u(t) = L_t x(t) + v(t)`` and the simulation loop.

Adaptive policies re-estimate the dynamics only at the epoch boundaries
``floor(gamma^m)``; in between the gain is frozen.  Each policy owns its
estimator and random streams, so a policy object must not be shared between
trajectories.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    NoiseModel,
    PerturbationConfig,
    SystemSpec,
    Trajectory,
    epoch_of,
    is_stabilizing,
    sample_noise_block,
    sample_perturbation,
    stage_costs,
)
from .errors import ConfigurationError, NumericalError
from .estimation import (
    ConstraintSet,
    EstimatorState,
    absorb_batch,
    guarded_lse,
    guarded_restricted_lse,
    residual_variance,
)
from .riccati import CostPair, DynamicsPair, closed_loop, solve_riccati, spectral_radius

logger = logging.getLogger(__name__)

POLICY_KINDS = ("optimal", "perturbed_linear", "perturbed_greedy", "restricted_greedy", "rce", "ts")

DIVERGENCE_LIMIT = 1e12


def optimal_input(x, L_star) -> np.ndarray:
    """``u = L(theta0) x``."""
    return np.asarray(L_star, dtype=float) @ np.asarray(x, dtype=float)


class Policy:
    """Common interface: ``act`` before the transition, ``observe`` after it."""

    kind = "base"

    def __init__(self, gain):
        self.gain = np.array(gain, dtype=float)
        self.events: list[dict] = []

    @property
    def estimate(self):
        return None

    @property
    def epoch(self) -> int:
        return 0

    def act(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def observe(self, x, u, x_next) -> None:
        pass

    def finalize(self, t: int) -> None:
        """Called once at the horizon so the estimate reflects all data."""


class OptimalPolicy(Policy):
    kind = "optimal"

    def __init__(self, L_star):
        super().__init__(L_star)
        self._zero = np.zeros(self.gain.shape[0])

    def act(self, x, t):
        return self.gain @ x, self._zero


class _EpochPolicy(Policy):
    """Shared machinery: epoch schedule, buffered estimator, gain refresh."""

    def __init__(self, cost: CostPair, p: int, r: int, initial_gain, gamma: float,
                 estimator: EstimatorState | None = None):
        super().__init__(initial_gain)
        if self.gain.shape != (r, p):
            raise ConfigurationError(f"gain must be {r}x{p}, got {self.gain.shape}")
        if gamma <= 1:
            raise ConfigurationError("gamma must exceed 1")
        self.cost = cost
        self.p, self.r = p, r
        self.gamma = gamma
        self.estimator = estimator.copy() if estimator is not None else EstimatorState(p, r)
        self.theta_hat = None
        self._epoch = 0
        self._next_update = 1
        self._buf_x, self._buf_u, self._buf_xn = [], [], []

    @property
    def estimate(self):
        return self.theta_hat

    @property
    def epoch(self) -> int:
        return self._epoch

    def is_update_time(self, t: int) -> bool:
        return t == self._next_update

    def _advance_schedule(self, t):
        self._epoch = epoch_of(t, self.gamma)
        m = self._epoch
        while math.floor(self.gamma ** m) <= t:
            m += 1
        self._next_update = math.floor(self.gamma ** m)

    def observe(self, x, u, x_next):
        self._buf_x.append(x)
        self._buf_u.append(u)
        self._buf_xn.append(x_next)

    def _flush(self):
        if self._buf_x:
            absorb_batch(self.estimator, self._buf_x, self._buf_u, self._buf_xn)
            self._buf_x, self._buf_u, self._buf_xn = [], [], []

    def _estimate(self, t) -> np.ndarray:
        return guarded_lse(self.estimator)

    def _design_theta(self, t) -> np.ndarray:
        """Parameter fed to the Riccati solver (randomised for baselines)."""
        return self.theta_hat

    def _set_gain_from(self, theta, t):
        try:
            self.gain = solve_riccati(DynamicsPair.from_theta(theta, self.p), self.cost).L
        except ArithmeticError as exc:
            self.events.append({"t": t, "event": "riccati_failure", "detail": str(exc)})
            logger.debug("t=%d: keeping previous gain (%s)", t, exc)

    def _maybe_update(self, t):
        if not self.is_update_time(t):
            return False
        self._flush()
        if self.estimator.n_samples > 0:
            self.theta_hat = self._estimate(t)
            self._set_gain_from(self._design_theta(t), t)
        self._advance_schedule(t)
        return True

    def finalize(self, t):
        if self.is_update_time(t):
            self._flush()
            if self.estimator.n_samples > 0:
                self.theta_hat = self._estimate(t)


class PerturbedLinearPolicy(_EpochPolicy):
    """Fixed gain with persistent isotropic Gaussian perturbation ``N(0, v_scale^2 I)``.

    The gain never adapts; the estimator is refreshed on the epoch schedule
    purely for reporting.
    """

    kind = "perturbed_linear"

    def __init__(self, cost, p, r, gain, v_scale: float, rng: np.random.Generator,
                 gamma: float = 1.2, estimator=None):
        super().__init__(cost, p, r, gain, gamma, estimator)
        self.v_scale = float(v_scale)
        self.rng = rng

    def _maybe_update(self, t):
        if not self.is_update_time(t):
            return False
        self._flush()
        if self.estimator.n_samples > 0:
            self.theta_hat = self._estimate(t)
        self._advance_schedule(t)
        return True

    def act(self, x, t):
        self._maybe_update(t)
        v = self.v_scale * self.rng.standard_normal(self.r) if self.v_scale else np.zeros(self.r)
        return self.gain @ x + v, v


class PerturbedGreedyPolicy(_EpochPolicy):
    """Certainty-equivalent gain plus decaying truncated-Gaussian input perturbation."""

    kind = "perturbed_greedy"

    def __init__(self, cost, p, r, initial_gain, perturbation: PerturbationConfig,
                 rng: np.random.Generator, estimator=None):
        perturbation.validate(r)
        super().__init__(cost, p, r, initial_gain, perturbation.gamma, estimator)
        self.perturbation = perturbation
        self.rng = rng
        self._v_block = np.zeros((0, r))
        self._v_start = 0

    def _perturb(self, t):
        i = t - self._v_start
        if i >= len(self._v_block) or i < 0:
            m = epoch_of(t, self.gamma)
            k = m
            while math.floor(self.gamma ** k) <= t:
                k += 1
            length = math.floor(self.gamma ** k) - t
            self._v_block = sample_perturbation(self.perturbation, m, self.r, self.rng, size=length)
            self._v_start = t
            i = 0
        return self._v_block[i]

    def act(self, x, t):
        self._maybe_update(t)
        v = self._perturb(t)
        return self.gain @ x + v, v


class RestrictedGreedyPolicy(PerturbedGreedyPolicy):
    """Perturbed greedy with least squares restricted to a known set ``Theta0``."""

    kind = "restricted_greedy"

    def __init__(self, cost, p, r, initial_gain, perturbation, rng, constraint: ConstraintSet,
                 estimator=None):
        super().__init__(cost, p, r, initial_gain, perturbation, rng, estimator)
        self.constraint = constraint

    def _estimate(self, t):
        return guarded_restricted_lse(self.estimator, self.constraint)


class RCEPolicy(_EpochPolicy):
    """Randomised certainty equivalence: ``L(theta_hat + G)``, ``G_ij ~ N(0, (sigma t^-1/4)^2)``."""

    kind = "rce"

    def __init__(self, cost, p, r, initial_gain, rng, gamma=1.2, sigma: float = 1.0, estimator=None):
        super().__init__(cost, p, r, initial_gain, gamma, estimator)
        self.sigma = float(sigma)
        self.rng = rng
        self._zero = np.zeros(r)

    def randomization_scale(self, t) -> float:
        return self.sigma * max(t, 1) ** -0.25

    def _design_theta(self, t):
        s = self.randomization_scale(t)
        if s == 0:
            return self.theta_hat
        return self.theta_hat + s * self.rng.standard_normal(self.theta_hat.shape)

    def act(self, x, t):
        self._maybe_update(t)
        return self.gain @ x, self._zero


def ts_row_covariance(gram, sigma_hat: float, ridge: float = 1.0) -> np.ndarray:
    """Posterior covariance ``sigma_hat^2 (V + ridge I)^{-1}`` shared by every row."""
    gram = np.asarray(gram, dtype=float)
    return sigma_hat**2 * np.linalg.inv(gram + ridge * np.eye(gram.shape[0]))


class TSPolicy(_EpochPolicy):
    """Thompson sampling: each row of ``theta`` drawn around the LSE row."""

    kind = "ts"

    def __init__(self, cost, p, r, initial_gain, rng, gamma=1.2, ridge: float = 1.0,
                 posterior_scale: float = 1.0, estimator=None):
        super().__init__(cost, p, r, initial_gain, gamma, estimator)
        self.ridge = float(ridge)
        self.posterior_scale = float(posterior_scale)
        self.rng = rng
        self._zero = np.zeros(r)

    def _design_theta(self, t):
        sigma_hat = self.posterior_scale * math.sqrt(residual_variance(self.estimator, self.theta_hat))
        if sigma_hat == 0:
            return self.theta_hat
        cov = ts_row_covariance(self.estimator.gram, sigma_hat, self.ridge)
        root = np.linalg.cholesky(0.5 * (cov + cov.T))
        z = self.rng.standard_normal(self.theta_hat.shape)
        return self.theta_hat + z @ root.T

    def act(self, x, t):
        self._maybe_update(t)
        return self.gain @ x, self._zero


# --------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    gain: np.ndarray
    estimator: EstimatorState
    fallback: bool
    rounds: int
    samples: int


def _certified(theta_hat, L, estimator, rng, draws):
    p = estimator.p
    if spectral_radius(closed_loop(DynamicsPair.from_theta(theta_hat, p), L)) >= 1:
        return False
    sigma = math.sqrt(residual_variance(estimator, theta_hat))
    if sigma == 0 or draws == 0:
        return True
    cov = ts_row_covariance(estimator.gram, sigma, ridge=0.0)
    root = np.linalg.cholesky(0.5 * (cov + cov.T))
    for _ in range(draws):
        th = theta_hat + rng.standard_normal(theta_hat.shape) @ root.T
        if not is_stabilizing(DynamicsPair.from_theta(th, p), L):
            return False
    return True


def bootstrap_stabilizer(
    spec: SystemSpec,
    n0: int,
    rng: np.random.Generator,
    noise_model: NoiseModel | None = None,
    input_scale: float = 1.0,
    rounds: int = 5,
    certify_draws: int = 10,
) -> BootstrapResult:
    """Excite, estimate and certify an initial stabilizing gain.

    Each round drives the true system from its current state with iid
    ``N(0, input_scale * 4^k I)`` inputs for ``n0`` steps, refits the LSE on
    all data so far and accepts ``L(theta_hat)`` if it stabilizes the fitted
    closed loop and every one of ``certify_draws`` samples from the LSE
    confidence ellipsoid.  After ``rounds`` failures ``L(theta0)`` is returned
    with ``fallback=True``.
    """
    p, r = spec.p, spec.r
    if n0 < p + r:
        raise ConfigurationError(f"bootstrap needs n0 >= p + r = {p + r}")
    noise_model = noise_model or NoiseModel.isotropic(p)
    A, B = spec.theta0.A, spec.theta0.B
    est = EstimatorState(p, r)
    x = np.zeros(p)
    t = 0
    for k in range(rounds):
        sd = math.sqrt(input_scale * 4.0**k)
        U = sd * rng.standard_normal((n0, r))
        W = sample_noise_block(noise_model, t + 1, n0, rng)
        X = np.empty((n0 + 1, p))
        X[0] = x
        for i in range(n0):
            X[i + 1] = A @ X[i] + B @ U[i] + W[i]
        absorb_batch(est, X[:-1], U, X[1:])
        x = X[-1]
        t += n0
        theta_hat = guarded_lse(est)
        try:
            L = solve_riccati(DynamicsPair.from_theta(theta_hat, p), spec.cost).L
        except ArithmeticError:
            continue
        if _certified(theta_hat, L, est, rng, certify_draws):
            return BootstrapResult(L, est, False, k + 1, t)
    logger.warning("bootstrap failed after %d rounds; falling back to the true optimal gain", rounds)
    return BootstrapResult(spec.L_star.copy(), est, True, rounds, t)


# --------------------------------------------------------------------------
# simulation


@dataclass
class SimulationResult:
    trajectory: Trajectory
    # t -> copy of the policy estimate at time t (None for non-adaptive kinds)
    estimates: dict
    epochs: dict


def simulate(
    spec: SystemSpec,
    policy: Policy,
    noise: np.ndarray,
    x0=None,
    record_times=(),
    seed: int | None = None,
) -> SimulationResult:
    """Run ``policy`` on the true system against the pre-drawn noise rows.

    ``noise[t]`` is ``w(t+1)``.  Estimates are captured at each ``t`` in
    ``record_times`` (``0 <= t <= horizon``) after any update scheduled at
    ``t``.
    """
    noise = np.asarray(noise, dtype=float)
    n, p = noise.shape
    r = spec.r
    A, B = spec.theta0.A, spec.theta0.B
    X = np.empty((n + 1, p))
    U = np.empty((n, r))
    V = np.empty((n, r))
    G = np.empty((n, r, p))
    X[0] = np.zeros(p) if x0 is None else x0
    rec = set(record_times)
    estimates, epochs = {}, {}
    for t in range(n):
        x = X[t]
        u, v = policy.act(x, t)
        G[t] = policy.gain
        if t in rec:
            est = policy.estimate
            estimates[t] = None if est is None else est.copy()
            epochs[t] = policy.epoch
        x_next = A @ x + B @ u + noise[t]
        if not np.all(np.abs(x_next) < DIVERGENCE_LIMIT):
            raise NumericalError(f"trajectory diverged at t={t + 1} under policy {policy.kind}")
        policy.observe(x, u, x_next)
        X[t + 1] = x_next
        U[t] = u
        V[t] = v
    policy.finalize(n)
    if n in rec:
        est = policy.estimate
        estimates[n] = None if est is None else est.copy()
        epochs[n] = policy.epoch
    traj = Trajectory(X, U, V, noise, stage_costs(spec, X[:-1], U), G, seed)
    return SimulationResult(traj, estimates, epochs)


def make_policy(
    kind: str,
    spec: SystemSpec,
    rngs: dict,
    bootstrap: BootstrapResult | None = None,
    perturbation: PerturbationConfig | None = None,
    constraint: ConstraintSet | None = None,
    gain=None,
    v_scale: float = 0.0,
    sigma_rce: float = 1.0,
    ts_ridge: float = 1.0,
    ts_scale: float = 1.0,
) -> Policy:
    """Build a fresh policy; adaptive kinds start from the bootstrap gain and data."""
    if kind not in POLICY_KINDS:
        raise ConfigurationError(f"unknown policy kind {kind!r}; choose from {POLICY_KINDS}")
    p, r, cost = spec.p, spec.r, spec.cost
    if kind == "optimal":
        return OptimalPolicy(spec.L_star)
    perturbation = perturbation or PerturbationConfig(mode="restricted" if kind == "restricted_greedy" else "algorithm1")
    L0 = bootstrap.gain if bootstrap is not None else spec.L_star
    est = bootstrap.estimator if bootstrap is not None else None
    if kind == "perturbed_linear":
        return PerturbedLinearPolicy(cost, p, r, spec.L_star if gain is None else gain, v_scale,
                                     rngs["perturbation"], perturbation.gamma, est)
    if kind == "perturbed_greedy":
        return PerturbedGreedyPolicy(cost, p, r, L0, perturbation, rngs["perturbation"], est)
    if kind == "restricted_greedy":
        constraint = constraint or ConstraintSet.known_input_matrix(spec.theta0.B)
        return RestrictedGreedyPolicy(cost, p, r, L0, perturbation, rngs["perturbation"], constraint, est)
    if kind == "rce":
        return RCEPolicy(cost, p, r, L0, rngs["baseline"], perturbation.gamma, sigma_rce, est)
    return TSPolicy(cost, p, r, L0, rngs["baseline"], perturbation.gamma, ts_ridge, ts_scale, est)
