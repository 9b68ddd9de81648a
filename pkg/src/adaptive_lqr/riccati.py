"""Discrete algebraic Riccati equation by fixed-point iteration.

For a pair ``theta = [A, B]`` and costs ``Q, R`` the Riccati operator is

    T(K) = Q + A'KA - A'KB (B'KB + R)^{-1} B'KA

and the optimal infinite-horizon gain is ``L = -(B'KB + R)^{-1} B'KA`` where
``K = T(K)``.  Iteration starts from ``K0 = Q`` and is symmetrised each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, InstabilityError, NonConvergenceError, NumericalError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000


def _as_matrix(a, name):
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class DynamicsPair:
    """The pair ``[A, B]`` with ``A`` p x p and ``B`` p x r."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ConfigurationError(f"B must have {A.shape[0]} rows, got {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.p + self.r

    @property
    def theta(self) -> np.ndarray:
        """Stacked ``p x (p + r)`` parameter matrix."""
        return np.hstack([self.A, self.B])

    @classmethod
    def from_theta(cls, theta, p: int) -> "DynamicsPair":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:, :p], theta[:, p:])


@dataclass(frozen=True)
class CostPair:
    """State and input weights; both symmetric positive definite."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R"):
            M = _as_matrix(getattr(self, name), name)
            if M.shape[0] != M.shape[1]:
                raise ConfigurationError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, atol=1e-12, rtol=0):
                raise ConfigurationError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise ConfigurationError(f"{name} must be positive definite")
            object.__setattr__(self, name, M)


@dataclass(frozen=True)
class RiccatiSolution:
    K: np.ndarray
    L: np.ndarray
    residual: float
    iterations: int
    # operator-norm increments ||K_{t+1} - K_t|| over the final iterations
    increments: tuple = ()


def _check_dims(theta: DynamicsPair, cost: CostPair, K=None):
    p, r = theta.p, theta.r
    if cost.Q.shape != (p, p):
        raise ConfigurationError(f"Q must be {p}x{p}, got {cost.Q.shape}")
    if cost.R.shape != (r, r):
        raise ConfigurationError(f"R must be {r}x{r}, got {cost.R.shape}")
    if K is not None and np.shape(K) != (p, p):
        raise ConfigurationError(f"K must be {p}x{p}, got {np.shape(K)}")


def _gain_terms(theta: DynamicsPair, cost: CostPair, K: np.ndarray):
    """Return ``(B'KA, cho_factor(B'KB + R))``."""
    A, B = theta.A, theta.B
    KB = K @ B
    S = B.T @ KB + cost.R
    try:
        factor = linalg.cho_factor(0.5 * (S + S.T))
    except linalg.LinAlgError as exc:
        raise NumericalError("B'KB + R is not positive definite") from exc
    return KB.T @ A, factor


def riccati_operator(theta: DynamicsPair, cost: CostPair, K) -> np.ndarray:
    """Evaluate ``T(K)`` once; output is symmetrised."""
    K = np.asarray(K, dtype=float)
    _check_dims(theta, cost, K)
    A = theta.A
    BtKA, factor = _gain_terms(theta, cost, K)
    out = cost.Q + A.T @ K @ A - BtKA.T @ linalg.cho_solve(factor, BtKA)
    return 0.5 * (out + out.T)


def feedback_gain(theta: DynamicsPair, cost: CostPair, K) -> np.ndarray:
    """``L = -(B'KB + R)^{-1} B'KA``."""
    K = np.asarray(K, dtype=float)
    _check_dims(theta, cost, K)
    BtKA, factor = _gain_terms(theta, cost, K)
    return -linalg.cho_solve(factor, BtKA)


def solve_riccati(
    theta: DynamicsPair,
    cost: CostPair,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RiccatiSolution:
    """Iterate ``K <- T(K)`` from ``K = Q`` until ``||K - T(K)||_2 <= tol``.

    Raises:
        NonConvergenceError: budget exhausted, or the iterate blew up; both
            usually mean ``theta`` is not stabilizable.
    """
    _check_dims(theta, cost)
    K = cost.Q.copy()
    history = []
    for it in range(1, max_iter + 1):
        # a non-stabilizable pair makes K overflow; that is caught below as non-finite
        with np.errstate(over="ignore", invalid="ignore"):
            K_next = riccati_operator(theta, cost, K)
            residual = float(np.linalg.norm(K_next - K, 2)) if np.all(np.isfinite(K_next)) else math.inf
        history.append(residual)
        K = K_next
        if not np.isfinite(residual):
            break
        if residual <= tol:
            # residual of the returned K itself
            final = float(np.linalg.norm(K - riccati_operator(theta, cost, K), 2))
            if final <= tol:
                L = feedback_gain(theta, cost, K)
                return RiccatiSolution(K, L, final, it, tuple(history[-12:]))
    raise NonConvergenceError(
        f"Riccati iteration did not reach tol={tol:g} in {max_iter} iterations "
        f"(last residual {history[-1]:.3g}); theta is likely not stabilizable",
        residual=history[-1],
        iterations=len(history),
    )


def spectral_radius(M) -> float:
    """Largest eigenvalue modulus."""
    M = _as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise ConfigurationError(f"matrix must be square, got {M.shape}")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigenvalue computation failed") from exc
    return float(np.max(np.abs(eig)))


def closed_loop(theta: DynamicsPair, L) -> np.ndarray:
    return theta.A + theta.B @ np.asarray(L, dtype=float)


def _lyapunov_sum(D0, P0, tol=1e-14, max_doublings=64):
    """``sum_j D0'^j P0 D0^j`` by repeated squaring (Smith iteration)."""
    X = P0.copy()
    Dk = D0.copy()
    for _ in range(max_doublings):
        inc = Dk.T @ X @ Dk
        X = X + inc
        X = 0.5 * (X + X.T)
        Dk = Dk @ Dk
        if np.linalg.norm(inc, 2) <= tol * max(1.0, np.linalg.norm(X, 2)):
            return X
    raise NonConvergenceError("Lyapunov series did not converge")


def lyapunov_tail(D0, P0, n_terms: int) -> np.ndarray:
    """Tail ``sum_{j >= n_terms} D0'^j P0 D0^j`` of the discrete Lyapunov series.

    Computed as the full solution of ``K - D0' K D0 = P0`` minus the first
    ``n_terms`` partial-sum terms.
    """
    D0 = _as_matrix(D0, "D0")
    P0 = _as_matrix(P0, "P0")
    if n_terms < 0:
        raise ConfigurationError("n_terms must be nonnegative")
    if spectral_radius(D0) >= 1.0:
        raise InstabilityError("D0 must be Schur stable for the Lyapunov series")
    K = _lyapunov_sum(D0, P0)
    return K - lyapunov_partial_sums(D0, P0, n_terms)[-1]


def lyapunov_partial_sums(D0, P0, n_terms: int) -> np.ndarray:
    """Array ``S`` with ``S[j] = sum_{i < j} D0'^i P0 D0^i`` for ``j = 0..n_terms``."""
    D0 = np.asarray(D0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    p = D0.shape[0]
    S = np.zeros((n_terms + 1, p, p))
    for j in range(n_terms):
        nxt = P0 + D0.T @ S[j] @ D0
        S[j + 1] = 0.5 * (nxt + nxt.T)
    return S
