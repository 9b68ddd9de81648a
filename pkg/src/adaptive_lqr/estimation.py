"""Least-squares identification of ``theta0 = [A0, B0]``.

The estimator keeps running sums so that any estimate is a small linear
solve: ``V = sum z z'`` and ``C = sum x(t+1) z'`` with ``z = [x(t); u(t)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, SingularityError
from .riccati import CostPair, DynamicsPair, NonConvergenceError, solve_riccati

SINGULAR_GUARD = 1e-10
GUARD_RIDGE = 1e-8


@dataclass
class EstimatorState:
    p: int
    r: int
    gram: np.ndarray = None
    cross: np.ndarray = None
    # sum ||x(t+1)||^2, only needed for residual variance
    target_sq: float = 0.0
    n_samples: int = 0
    theta_hat: np.ndarray | None = None

    def __post_init__(self):
        q = self.p + self.r
        if self.gram is None:
            self.gram = np.zeros((q, q))
        if self.cross is None:
            self.cross = np.zeros((self.p, q))

    @property
    def q(self) -> int:
        return self.p + self.r

    def copy(self) -> "EstimatorState":
        return EstimatorState(
            self.p, self.r, self.gram.copy(), self.cross.copy(), self.target_sq, self.n_samples,
            None if self.theta_hat is None else self.theta_hat.copy(),
        )


def absorb(state: EstimatorState, x, u, x_next) -> EstimatorState:
    """Add one transition in place and return the state."""
    z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])
    x_next = np.asarray(x_next, dtype=float)
    if z.shape != (state.q,) or x_next.shape != (state.p,):
        raise ConfigurationError("transition dimensions do not match estimator")
    state.gram += np.outer(z, z)
    state.cross += np.outer(x_next, z)
    state.target_sq += float(x_next @ x_next)
    state.n_samples += 1
    return state


def absorb_batch(state: EstimatorState, X, U, X_next) -> EstimatorState:
    """Vectorised :func:`absorb` over aligned rows."""
    X = np.asarray(X, dtype=float).reshape(-1, state.p)
    U = np.asarray(U, dtype=float).reshape(-1, state.r)
    X_next = np.asarray(X_next, dtype=float).reshape(-1, state.p)
    if not len(X) == len(U) == len(X_next):
        raise ConfigurationError("batch rows are not aligned")
    Z = np.hstack([X, U])
    state.gram += Z.T @ Z
    state.gram = 0.5 * (state.gram + state.gram.T)
    state.cross += X_next.T @ Z
    state.target_sq += float(np.sum(X_next * X_next))
    state.n_samples += len(Z)
    return state


def lse_objective(state: EstimatorState, theta) -> float:
    """``sum ||x(t+1) - theta z(t)||^2`` evaluated from the running sums."""
    theta = np.asarray(theta, dtype=float)
    return float(state.target_sq - 2 * np.sum(theta * state.cross) + np.sum((theta @ state.gram) * theta))


def solve_lse(state: EstimatorState, ridge: float = 0.0) -> np.ndarray:
    """``cross (V + ridge I)^{-1}``.

    Raises:
        SingularityError: ``V`` is singular and ``ridge == 0``.
    """
    if state.n_samples < 1:
        raise ConfigurationError("no samples absorbed")
    if ridge < 0:
        raise ConfigurationError("ridge must be nonnegative")
    G = state.gram + ridge * np.eye(state.q)
    try:
        factor = linalg.cho_factor(G)
    except linalg.LinAlgError:
        raise SingularityError("Gram matrix is singular; pass ridge > 0") from None
    if ridge == 0:
        eig = np.linalg.eigvalsh(G)
        if eig[0] <= 1e-14 * eig[-1]:
            raise SingularityError("Gram matrix is numerically singular; pass ridge > 0")
    theta = linalg.cho_solve(factor, state.cross.T).T
    state.theta_hat = theta
    return theta


def guarded_lse(state: EstimatorState) -> np.ndarray:
    """Unregularised LSE, with a tiny ridge when ``lambda_min(V)`` is below the guard."""
    ridge = GUARD_RIDGE if np.linalg.eigvalsh(state.gram).min() < SINGULAR_GUARD else 0.0
    try:
        return solve_lse(state, ridge)
    except SingularityError:
        return solve_lse(state, GUARD_RIDGE)


def residual_variance(state: EstimatorState, theta=None) -> float:
    """Per-coordinate residual variance ``RSS / (p * max(n - q, 1))``."""
    theta = state.theta_hat if theta is None else theta
    rss = max(lse_objective(state, theta), 0.0)
    return rss / (state.p * max(state.n_samples - state.q, 1))


# --------------------------------------------------------------------------
# constraint sets


CONSTRAINT_KINDS = ("none", "support", "subspace")


@dataclass(frozen=True)
class ConstraintSet:
    """``Theta0 = offset + span(basis)`` (subspace) or a zero pattern (support).

    ``basis`` has shape ``(d, p, q)`` and must be Frobenius-orthonormal.  The
    ``offset`` makes known-block sets such as ``{[A, B0]}`` expressible.
    """

    kind: str = "none"
    support_mask: np.ndarray | None = None
    basis: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ConfigurationError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "support":
            if self.support_mask is None:
                raise ConfigurationError("support constraint needs support_mask")
            object.__setattr__(self, "support_mask", np.asarray(self.support_mask, dtype=bool))
        if self.kind == "subspace":
            if self.basis is None:
                raise ConfigurationError("subspace constraint needs basis")
            basis = np.asarray(self.basis, dtype=float)
            if basis.ndim != 3:
                raise ConfigurationError("basis must have shape (d, p, q)")
            d, p, q = basis.shape
            if d > p * q:
                raise ConfigurationError("subspace dimension exceeds p*q")
            U = basis.reshape(d, p * q)
            if d and not np.allclose(U @ U.T, np.eye(d), atol=1e-12):
                raise ConfigurationError("basis must be orthonormal")
            object.__setattr__(self, "basis", basis)
            if self.offset is not None:
                object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))

    @classmethod
    def known_input_matrix(cls, B0) -> "ConstraintSet":
        """``{[A, B0] : A arbitrary}``, dimension ``p^2``."""
        B0 = np.asarray(B0, dtype=float)
        p, r = B0.shape
        basis = np.zeros((p * p, p, p + r))
        for k in range(p * p):
            basis[k, k // p, k % p] = 1.0
        offset = np.hstack([np.zeros((p, p)), B0])
        return cls(kind="subspace", basis=basis, offset=offset)

    @classmethod
    def from_support(cls, mask) -> "ConstraintSet":
        return cls(kind="support", support_mask=np.asarray(mask, dtype=bool))

    def dimension(self, p: int, q: int) -> int:
        if self.kind == "none":
            return p * q
        if self.kind == "support":
            return int(self.support_mask.sum())
        return self.basis.shape[0]

    def _offset(self, p, q):
        return np.zeros((p, q)) if self.offset is None else self.offset

    def tangent_basis(self, p: int, q: int) -> np.ndarray:
        """Orthonormal basis ``(d, p, q)`` of the directions inside the set."""
        if self.kind == "none":
            return np.eye(p * q).reshape(p * q, p, q)
        if self.kind == "support":
            idx = np.flatnonzero(self.support_mask.ravel())
            out = np.zeros((len(idx), p * q))
            out[np.arange(len(idx)), idx] = 1.0
            return out.reshape(-1, p, q)
        return self.basis

    def contains(self, theta, atol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        p, q = theta.shape
        if self.kind == "none":
            return True
        if self.kind == "support":
            return bool(np.all(np.abs(theta[~self.support_mask]) <= atol))
        U = self.basis.reshape(self.basis.shape[0], p * q)
        d = (theta - self._offset(p, q)).ravel()
        return bool(np.linalg.norm(d - U.T @ (U @ d)) <= atol * max(1.0, np.linalg.norm(theta)))


def solve_restricted_lse(state: EstimatorState, constraint: ConstraintSet, ridge: float = 0.0) -> np.ndarray:
    """Minimise the LSE objective over ``constraint``; the output lies in the set exactly."""
    p, q = state.p, state.q
    if constraint.kind == "none":
        return solve_lse(state, ridge)
    if state.n_samples < 1:
        raise ConfigurationError("no samples absorbed")
    V = state.gram
    C = state.cross
    if constraint.kind == "support":
        theta = np.zeros((p, q))
        for i in range(p):
            cols = np.flatnonzero(constraint.support_mask[i])
            if cols.size == 0:
                continue
            G = V[np.ix_(cols, cols)] + ridge * np.eye(cols.size)
            try:
                theta[i, cols] = linalg.solve(G, C[i, cols], assume_a="pos")
            except linalg.LinAlgError:
                raise SingularityError(f"row {i}: restricted Gram is singular; pass ridge > 0") from None
        state.theta_hat = theta
        return theta
    basis = constraint.basis
    d = basis.shape[0]
    offset = constraint._offset(p, q)
    if d == 0:
        state.theta_hat = offset.copy()
        return state.theta_hat
    # row-major vec: tr(theta V theta') = vec(theta)' (I_p kron V) vec(theta)
    BV = basis @ V  # (d, p, q)
    G = np.einsum("iab,jab->ij", BV, basis) + ridge * np.eye(d)
    rhs = np.einsum("iab,ab->i", basis, C - offset @ V)
    try:
        coef = linalg.solve(0.5 * (G + G.T), rhs, assume_a="pos")
    except linalg.LinAlgError:
        raise SingularityError("restricted normal equations are singular; pass ridge > 0") from None
    theta = offset + np.tensordot(coef, basis, axes=1)
    state.theta_hat = theta
    return theta


def guarded_restricted_lse(state: EstimatorState, constraint: ConstraintSet) -> np.ndarray:
    ridge = GUARD_RIDGE if np.linalg.eigvalsh(state.gram).min() < SINGULAR_GUARD else 0.0
    try:
        return solve_restricted_lse(state, constraint, ridge)
    except SingularityError:
        return solve_restricted_lse(state, constraint, GUARD_RIDGE)


# --------------------------------------------------------------------------
# excitation diagnostics


@dataclass(frozen=True)
class ExcitationReport:
    lambda_min_gram: float
    lambda_min_sigma_w: float
    lambda_min_sigma_v: float
    lambda_lower: float
    energy_w: float
    energy_v: float
    cond_w_satisfied: bool
    cond_v_satisfied: bool


def _running_max(a):
    return np.maximum.accumulate(a) if len(a) else a


def excitation_report(
    state: EstimatorState,
    noise_model,
    perturb_history: Sequence[np.ndarray],
    trajectory=None,
    system=None,
    delta: float = 0.05,
) -> ExcitationReport:
    """Excitation diagnostics for the conditions on the noise and perturbation energy.

    ``Sigma_w`` sums the configured noise covariances for ``t = 1..n-1`` and
    ``Sigma_v`` sums the supplied ``perturb_history`` (per-step perturbation
    covariances, normally ``t = 0..n-2``).  The interaction energies use
    running maxima of realized norms from ``trajectory`` in place of the
    deterministic bounds; without a trajectory they are taken as zero and
    only positivity of the minimum eigenvalues is checked.
    """
    n = state.n_samples
    p, q = state.p, state.q
    lam_gram = max(float(np.linalg.eigvalsh(state.gram).min()), 0.0)
    if noise_model.is_constant:
        sigma_w = max(n - 1, 0) * noise_model.covariance
    else:
        sigma_w = sum((noise_model.covariance_at(t) for t in range(1, n)), np.zeros((p, p)))
    lam_w = float(np.linalg.eigvalsh(sigma_w).min()) if n > 1 else 0.0
    hist = list(perturb_history)
    r = state.r
    sigma_v = np.sum(hist, axis=0) if hist else np.zeros((r, r))
    lam_v = float(np.linalg.eigvalsh(np.atleast_2d(sigma_v)).min())
    lam_w, lam_v = max(lam_w, 0.0), max(lam_v, 0.0)

    V1 = V2 = 0.0
    if trajectory is not None and system is not None and trajectory.horizon >= 2:
        tr = trajectory
        k = tr.horizon - 1  # t = 0..n-2
        B0n = np.linalg.norm(system.theta0.B, 2)
        D0n = np.linalg.norm(system.D0, 2)
        Ln = np.linalg.norm(system.L_star, 2)
        vbar = _running_max(np.linalg.norm(tr.v, axis=1))[:k]
        wbar = _running_max(np.linalg.norm(tr.w, axis=1))[:k]  # w(t+1)
        xbar = _running_max(np.linalg.norm(tr.x[:-1], axis=1))[:k]
        if tr.gains is not None:
            dev = np.einsum("tij,tj->ti", tr.gains - system.L_star, tr.x[:-1])
            lbar = _running_max(np.linalg.norm(dev, axis=1))[:k]
        else:
            lbar = np.zeros(k)
        ybar = B0n * vbar + wbar + 2 * B0n * lbar + 2 * D0n * xbar
        V1 = float(np.sqrt(np.sum(ybar**2 * (B0n * vbar + wbar) ** 2)))
        V2 = float(np.sqrt(np.sum(vbar**2 * (2 * (1 + Ln) * xbar + 2 * lbar + vbar) ** 2)))
    cond_w = lam_w > 0 and lam_w >= 4 * V1 * math.sqrt(math.log(8 * p / delta))
    cond_v = lam_v > 0 and lam_v >= 4 * V2 * math.sqrt(math.log(8 * q / delta))
    return ExcitationReport(lam_gram, lam_w, lam_v, min(lam_w, lam_v), V1, V2, bool(cond_w), bool(cond_v))


# --------------------------------------------------------------------------
# identifiability


def _gain_or_none(theta, p, cost):
    try:
        return solve_riccati(DynamicsPair.from_theta(theta, p), cost).L
    except (NonConvergenceError, ArithmeticError):
        return None


def identifiability_probe(
    constraint: ConstraintSet,
    theta0: DynamicsPair,
    cost: CostPair,
    n_samples: int,
    rng: np.random.Generator,
    radius: float = 0.05,
    max_resample: int = 20,
) -> float:
    """Sampled lower bound on the identifiability ratio.

    Over pairs ``theta1, theta2`` drawn in ``constraint`` within ``radius``
    (operator norm) of ``theta0``, returns the largest
    ``||L(theta2) - L(theta0)|| / ||(theta2 - theta0) [I; L(theta1)]||``.
    Each ``theta1`` also contributes a ``theta2`` along the null space of
    ``Delta -> Delta [I; L(theta1)]`` within the set when one exists; a zero
    denominator with a nonzero numerator returns ``inf``.  A singleton set
    returns 0.
    """
    p, q = theta0.p, theta0.q
    basis = constraint.tangent_basis(p, q)
    d = basis.shape[0]
    if d == 0:
        return 0.0
    th0 = theta0.theta
    L0 = solve_riccati(theta0, cost).L

    def draw_direction():
        c = rng.standard_normal(d)
        D = np.tensordot(c, basis, axes=1)
        return D / np.linalg.norm(D, 2)

    best = 0.0
    for _ in range(n_samples):
        for _ in range(max_resample):
            th1 = th0 + radius * rng.uniform() * draw_direction()
            L1 = _gain_or_none(th1, p, cost)
            if L1 is not None:
                break
        else:
            continue
        Ltil = np.vstack([np.eye(p), L1])  # q x p
        candidates = [radius * rng.uniform(0.1, 1.0) * draw_direction()]
        # map c -> (sum c_i E_i) Ltil, as a (p*p) x d matrix
        Mmap = np.stack([(E @ Ltil).ravel() for E in basis], axis=1)
        sv = np.linalg.svd(Mmap, compute_uv=False, full_matrices=True) if d else np.array([])
        null_dim = d - int(np.sum(sv > 1e-12 * max(1.0, sv.max(initial=0.0))))
        if null_dim > 0:
            _, _, Vt = np.linalg.svd(Mmap, full_matrices=True)
            c = Vt[-null_dim:].T @ rng.standard_normal(null_dim)
            D = np.tensordot(c, basis, axes=1)
            candidates.append(radius * D / np.linalg.norm(D, 2))
        for Delta in candidates:
            L2 = _gain_or_none(th0 + Delta, p, cost)
            if L2 is None:
                continue
            num = float(np.linalg.norm(L2 - L0, 2))
            den = float(np.linalg.norm(Delta @ Ltil, 2))
            if den <= 1e-12 * float(np.linalg.norm(Delta, 2)):
                if num > 1e-10:
                    return math.inf
                continue
            best = max(best, num / den)
    return best
