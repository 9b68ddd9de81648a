"""Regret under common random numbers, identification error and the regret decomposition.

Regret compares a policy with the optimal regulator driven by the *same*
noise rows from the same initial state, so it is a pathwise quantity.  Two
independent routes recompute the final regret from a recorded trace:

* :func:`telescoping_oracle` simulates the switched policies ``pi_0..pi_n``
  (``pi_k`` follows the trace before ``k`` and the optimal gain afterwards)
  and sums consecutive cost differences.
* :func:`closed_form_decomposition` evaluates the quadratic and martingale
  terms of the decomposition directly from the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SystemSpec, Trajectory, stage_costs
from .errors import ConfigurationError, InstabilityError, IntegrityError
from .policies import Policy, SimulationResult, simulate
from .riccati import lyapunov_partial_sums, spectral_radius


@dataclass(frozen=True)
class RegretRecord:
    t: int
    epoch: int
    regret: float
    norm_regret_thm3: float
    est_err_sq: float
    norm_err_thm3: float


@dataclass(frozen=True)
class DecompositionTerms:
    phi: float
    zeta: float
    xi: float
    psi: float
    martingale: float
    telescoping_total: float | None = None

    @property
    def total(self) -> float:
        return self.phi + self.zeta + self.xi + self.psi + self.martingale


def identification_error(theta_hat, theta0) -> float:
    """Spectral norm ``||theta_hat - theta0||_2``."""
    a = np.asarray(theta_hat, dtype=float)
    b = np.asarray(theta0, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, 2))


def normalizers(t: float, alpha: float = 2.0, delta: float = 1.0) -> dict:
    """Denominators of the high-probability rates at horizon ``t``.

    ``alpha`` is the noise tail exponent (``inf`` for bounded noise).
    """
    if t < 3:
        raise ConfigurationError("normalizations need t >= 3")
    if alpha <= 0 or delta <= 0:
        raise ConfigurationError("alpha and delta must be positive")
    inv = 0.0 if math.isinf(alpha) else 1.0 / alpha
    ell = math.log(t / delta)
    return {
        "regret_thm3": math.sqrt(t) * ell ** max(2.0, 4.0 * inv),
        "error_thm3": t ** -0.5 * ell ** (2.0 * inv - 1.0),
        "regret_thm4": math.log(t) * ell ** (1.0 + 2.0 * inv),
    }


def rate_normalizations(t: int, regret: float, est_err_sq: float = math.nan,
                           alpha: float = 2.0, delta: float = 1.0) -> dict:
    """Normalised regret and squared error; all NaN for ``t < 3``."""
    if t < 3:
        return {"norm_regret_thm3": math.nan, "norm_err_thm3": math.nan, "norm_regret_thm4": math.nan}
    d = normalizers(t, alpha, delta)
    return {
        "norm_regret_thm3": regret / d["regret_thm3"],
        "norm_err_thm3": est_err_sq / d["error_thm3"],
        "norm_regret_thm4": regret / d["regret_thm4"],
    }


# --------------------------------------------------------------------------
# coupled regret


def optimal_costs(spec: SystemSpec, noise: np.ndarray, x0=None) -> np.ndarray:
    """Stage costs of the optimal regulator on ``noise`` (``noise[t] = w(t+1)``)."""
    noise = np.asarray(noise, dtype=float)
    n, p = noise.shape
    A, B, L = spec.theta0.A, spec.theta0.B, spec.L_star
    X = np.empty((n, p))
    U = np.empty((n, L.shape[0]))
    x = np.zeros(p) if x0 is None else np.asarray(x0, dtype=float)
    # same operation order as simulate(), so pi* against itself is exactly zero
    for t in range(n):
        u = L @ x
        X[t], U[t] = x, u
        x = A @ x + B @ u + noise[t]
    return stage_costs(spec, X, U)


@dataclass
class CoupledRun:
    records: list
    simulation: SimulationResult
    # regret[t] = cumulative excess cost over stages 0..t-1
    regret: np.ndarray

    @property
    def trajectory(self) -> Trajectory:
        return self.simulation.trajectory


def coupled_regret(
    spec: SystemSpec,
    policy: Policy,
    noise: np.ndarray,
    record_times=None,
    x0=None,
    alpha: float = 2.0,
    delta: float = 1.0,
    seed: int | None = None,
) -> CoupledRun:
    """Run ``policy`` and the optimal regulator on identical noise and record regret.

    ``record_times`` defaults to every ``t = 1..n``.  ``est_err_sq`` is NaN for
    policies without an estimate.
    """
    noise = np.asarray(noise, dtype=float)
    n = len(noise)
    times = sorted(set(range(1, n + 1) if record_times is None else record_times))
    if times and (times[0] < 0 or times[-1] > n):
        raise ConfigurationError("record times must lie in [0, horizon]")
    sim = simulate(spec, policy, noise, x0=x0, record_times=times, seed=seed)
    diff = sim.trajectory.cost - optimal_costs(spec, noise, x0)
    regret = np.concatenate([[0.0], np.cumsum(diff)])
    th0 = spec.theta0.theta
    records = []
    for t in times:
        est = sim.estimates.get(t)
        err_sq = math.nan if est is None else identification_error(est, th0) ** 2
        norm = rate_normalizations(t, float(regret[t]), err_sq, alpha, delta)
        records.append(RegretRecord(t, int(sim.epochs.get(t, 0)), float(regret[t]),
                                    norm["norm_regret_thm3"], err_sq, norm["norm_err_thm3"]))
    return CoupledRun(records, sim, regret)


# --------------------------------------------------------------------------
# oracles


def _check_trace(spec: SystemSpec, trace: Trajectory, seed, rtol=1e-9):
    if seed is not None and trace.seed is not None and int(seed) != int(trace.seed):
        raise IntegrityError(f"trace was recorded with seed {trace.seed}, not {seed}")
    if trace.gains is None:
        raise IntegrityError("trace has no recorded gains")
    n = trace.horizon
    if trace.x.shape[0] != n + 1 or trace.w.shape[0] != n or trace.gains.shape[0] != n:
        raise IntegrityError("trace arrays are not aligned")
    A, B = spec.theta0.A, spec.theta0.B
    X = trace.x
    u_fb = np.einsum("tij,tj->ti", trace.gains, X[:-1]) + trace.v
    scale = 1.0 + np.abs(X).max()
    if np.abs(u_fb - trace.u).max(initial=0.0) > rtol * scale * (1 + np.abs(trace.gains).max(initial=0.0)):
        raise IntegrityError("recorded inputs are not L_t x(t) + v(t)")
    pred = X[:-1] @ A.T + trace.u @ B.T + trace.w
    if np.abs(pred - X[1:]).max(initial=0.0) > rtol * scale * 10:
        raise IntegrityError("recorded states do not follow the true dynamics")


def telescoping_oracle(spec: SystemSpec, trace: Trajectory, seed: int | None = None) -> float:
    """Sum over ``k = 1..n`` of ``J(pi_k) - J(pi_{k-1})`` on the trace's noise.

    All ``n + 1`` switched policies are propagated together from ``x(0)``.

    Raises:
        IntegrityError: seed differs from the trace's, or the trace is not a
            consistent closed-loop record.
    """
    _check_trace(spec, trace, seed)
    n = trace.horizon
    A, B, L = spec.theta0.A, spec.theta0.B, spec.L_star
    Q, R = spec.cost.Q, spec.cost.R
    X = np.tile(trace.x[0], (n + 1, 1))  # row k is policy pi_k
    J = np.zeros(n + 1)
    ks = np.arange(n + 1)
    for t in range(n):
        follow = ks > t
        U = X @ L.T
        U[follow] = X[follow] @ trace.gains[t].T + trace.v[t]
        J += np.einsum("ki,ij,kj->k", X, Q, X) + np.einsum("ki,ij,kj->k", U, R, U)
        X = X @ A.T + U @ B.T + trace.w[t]
    return float(np.sum(J[1:] - J[:-1]))


def _psd_sqrt(M):
    lam, vec = np.linalg.eigh(0.5 * (M + M.T))
    return (vec * np.sqrt(np.clip(lam, 0, None))) @ vec.T


def closed_form_decomposition(spec: SystemSpec, trace: Trajectory, horizon: int | None = None) -> DecompositionTerms:
    """Evaluate ``phi, zeta, xi, psi`` and the martingale sum from a trace.

    With ``Delta_k = B0 (L_k - L*)``, ``S_j`` the ``j``-term partial Lyapunov
    sums of ``P0 = Q + L*'RL*`` under ``D0`` and ``T_k = K - S_{n-k-1}``:

    * ``phi = -sum x'(D0'T Delta + Delta'T D0 + Delta'T Delta) x``
    * ``psi = sum ||M^{1/2} (L_k - L*) x||^2`` with ``M = B0'KB0 + R``
    * ``zeta = sum v'(R + B0'S B0) v``
    * ``xi = 2 sum x'(L_k'R + (D0 + Delta)'S B0) v``
    * martingale ``= sum_j w(j)' 2 S_{n-j} a_j`` where ``a_j`` is the
      accumulated closed-loop deviation ``D0 a_{j-1} + Delta x + B0 v``.
    """
    _check_trace(spec, trace, None)
    n = trace.horizon if horizon is None else int(horizon)
    if not 0 < n <= trace.horizon:
        raise ConfigurationError("horizon must lie in [1, trace length]")
    D0 = spec.D0
    if spectral_radius(D0) >= 1:
        raise InstabilityError("optimal closed loop is not Schur stable")
    B, L, K = spec.theta0.B, spec.L_star, spec.optimal.K
    R = spec.cost.R
    P0 = spec.cost.Q + L.T @ R @ L
    S = lyapunov_partial_sums(D0, P0, n)
    M = B.T @ K @ B + R
    Mh = _psd_sqrt(M)
    X, V, W, G = trace.x, trace.v, trace.w, trace.gains

    phi = zeta = xi = psi = mart = 0.0
    a = np.zeros(spec.p)
    for k in range(n):
        x, v, Lk = X[k], V[k], G[k]
        dL = Lk - L
        Dk = B @ dL
        Sk = S[n - k - 1]
        Tk = K - Sk
        H = D0.T @ Tk @ Dk
        H = H + H.T + Dk.T @ Tk @ Dk
        phi -= x @ H @ x
        psi += float(np.sum((Mh @ dL @ x) ** 2))
        zeta += v @ (R + B.T @ Sk @ B) @ v
        xi += 2.0 * x @ (Lk.T @ R + (D0 + Dk).T @ Sk @ B) @ v
        # a_{k+1} and its pairing with w(k+1) = W[k]
        a = D0 @ a + Dk @ x + B @ v
        if k + 1 <= n - 1:
            mart += 2.0 * W[k] @ S[n - k - 1] @ a
    return DecompositionTerms(float(phi), float(zeta), float(xi), float(psi), float(mart))


def decomposition_check(spec: SystemSpec, trace: Trajectory, seed: int | None = None) -> dict:
    """Direct regret, telescoping total and closed-form total for one trace."""
    direct = float(np.sum(trace.cost) - np.sum(optimal_costs(spec, trace.w, trace.x[0])))
    tele = telescoping_oracle(spec, trace, seed)
    terms = closed_form_decomposition(spec, trace)
    terms = DecompositionTerms(terms.phi, terms.zeta, terms.xi, terms.psi, terms.martingale, tele)
    return {"direct": direct, "telescoping": tele, "terms": terms}
