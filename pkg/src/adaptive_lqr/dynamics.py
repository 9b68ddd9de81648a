"""True system, noise families, epoch schedule and perturbation sampler.

Noise ``w(t)`` and input perturbations ``v(t)`` are always drawn from
separate ``numpy.random.Generator`` streams so the two processes are
independent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np
from scipy import optimize, special, stats

from .errors import ConfigurationError, NumericalError
from .riccati import CostPair, DynamicsPair, RiccatiSolution, closed_loop, solve_riccati, spectral_radius

NOISE_FAMILIES = ("gaussian", "truncated_gaussian", "symmetric_weibull_tail")
PERTURBATION_MODES = ("algorithm1", "restricted")

_MAX_REJECTION_ROUNDS = 10_000


@dataclass(frozen=True)
class SystemSpec:
    """True dynamics plus costs; stabilizability is certified on construction."""

    theta0: DynamicsPair
    cost: CostPair
    optimal: RiccatiSolution = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.cost.Q.shape != (self.p, self.p) or self.cost.R.shape != (self.r, self.r):
            raise ConfigurationError("cost matrices do not match system dimensions")
        object.__setattr__(self, "optimal", solve_riccati(self.theta0, self.cost))

    @property
    def p(self) -> int:
        return self.theta0.p

    @property
    def r(self) -> int:
        return self.theta0.r

    @property
    def q(self) -> int:
        return self.theta0.q

    @property
    def L_star(self) -> np.ndarray:
        return self.optimal.L

    @property
    def D0(self) -> np.ndarray:
        return closed_loop(self.theta0, self.optimal.L)


# --------------------------------------------------------------------------
# noise


def _psd_sqrt(S):
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
        raise ConfigurationError("covariance must be positive semidefinite")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass(frozen=True)
class NoiseModel:
    """Mean-zero noise law for ``w(t)``, ``t >= 1``.

    ``covariance`` is a ``p x p`` matrix, a sequence of matrices cycled over
    ``t`` (heteroscedastic schedule), or a callable ``t -> matrix``.  For
    ``truncated_gaussian`` the matrix is the pre-truncation covariance and
    ``bound`` the hard norm cap.
    """

    family: str = "gaussian"
    covariance: Any = None
    alpha: float | None = None
    bound: float | None = None

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ConfigurationError(f"unknown noise family {self.family!r}")
        if self.covariance is None:
            raise ConfigurationError("noise covariance is required")
        cov = self.covariance
        if not callable(cov):
            arr = np.asarray(cov, dtype=float)
            if arr.ndim == 2:
                arr = arr[None]
            if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
                raise ConfigurationError("covariance must be p x p or a sequence of p x p")
            for S in arr:
                _psd_sqrt(S)
            object.__setattr__(self, "covariance", arr if len(arr) > 1 else arr[0])
        if self.family == "truncated_gaussian":
            if self.bound is None or self.bound <= 0:
                raise ConfigurationError("truncated_gaussian needs a positive bound")
        if self.family == "symmetric_weibull_tail":
            if self.alpha is None or self.alpha <= 0:
                raise ConfigurationError("symmetric_weibull_tail needs alpha > 0")

    @classmethod
    def isotropic(cls, p: int, scale: float = 1.0, family: str = "gaussian", **kw) -> "NoiseModel":
        return cls(family=family, covariance=scale * np.eye(p), **kw)

    @property
    def tail_exponent(self) -> float:
        if self.family == "gaussian":
            return 2.0
        if self.family == "truncated_gaussian":
            return math.inf
        return float(self.alpha)

    @property
    def is_constant(self) -> bool:
        return not callable(self.covariance) and np.ndim(self.covariance) == 2

    @property
    def p(self) -> int:
        return self.covariance_at(1).shape[0]

    def covariance_at(self, t: int) -> np.ndarray:
        cov = self.covariance
        if callable(cov):
            return np.asarray(cov(t), dtype=float)
        if np.ndim(cov) == 2:
            return cov
        return cov[(t - 1) % len(cov)]

    def min_eig_time_average(self, n: int) -> float:
        """``n^-1 sum_{t=1}^n lambda_min(E w(t) w(t)')``."""
        if self.is_constant:
            return float(np.linalg.eigvalsh(self.covariance).min())
        return float(np.mean([np.linalg.eigvalsh(self.covariance_at(t)).min() for t in range(1, n + 1)]))


def _draw_noise(model: NoiseModel, root: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    p = root.shape[0]
    if model.family == "gaussian":
        return rng.standard_normal((size, p)) @ root.T
    if model.family == "truncated_gaussian":
        out = np.empty((size, p))
        filled = 0
        for _ in range(_MAX_REJECTION_ROUNDS):
            need = size - filled
            draw = rng.standard_normal((max(need, 8), p)) @ root.T
            ok = draw[np.linalg.norm(draw, axis=1) <= model.bound][:need]
            out[filled:filled + len(ok)] = ok
            filled += len(ok)
            if filled == size:
                return out
        raise NumericalError("truncated noise rejection sampler did not terminate")
    # symmetric_weibull_tail: Weibull radius on a uniform direction, scaled to unit covariance
    alpha = model.alpha
    z = rng.standard_normal((size, p))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    radius = rng.weibull(alpha, size=(size, 1))
    scale = math.sqrt(p / special.gamma(1.0 + 2.0 / alpha))
    return (scale * radius * z / norms) @ root.T


def sample_noise(model: NoiseModel, t: int, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``w(t)``."""
    root = _psd_sqrt(model.covariance_at(t))
    return _draw_noise(model, root, 1, rng)[0]


def sample_noise_block(model: NoiseModel, t0: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows are ``w(t0), ..., w(t0 + n - 1)``."""
    if model.is_constant:
        return _draw_noise(model, _psd_sqrt(model.covariance), n, rng)
    out = np.empty((n, model.p))
    for i in range(n):
        out[i] = sample_noise(model, t0 + i, rng)
    return out


# --------------------------------------------------------------------------
# epochs


def _boundary(gamma: float, m: int) -> int:
    return math.floor(gamma ** m)


def epoch_of(t: int, gamma: float) -> int:
    """Smallest ``m`` with ``t < floor(gamma^m)``.

    Exponents whose floor repeats an earlier boundary give empty epochs and are
    skipped, so the result is the exponent of the epoch that actually holds
    ``t``.
    """
    if gamma <= 1:
        raise ConfigurationError("gamma must exceed 1")
    if t < 0:
        raise ConfigurationError("t must be nonnegative")
    m = 0 if t == 0 else max(0, int(math.log(t) / math.log(gamma)) - 1)
    while _boundary(gamma, m) <= t:
        m += 1
    while m > 0 and _boundary(gamma, m - 1) > t:
        m -= 1
    return m


def epoch_schedule(gamma: float, horizon: int) -> np.ndarray:
    """``epoch_of(t, gamma)`` for ``t = 0..horizon`` as an int array."""
    out = np.empty(horizon + 1, dtype=int)
    m, t = 0, 0
    while t <= horizon:
        b = _boundary(gamma, m)
        while t < b and t <= horizon:
            out[t] = m
            t += 1
        m += 1
    return out


def update_times(gamma: float, horizon: int) -> list[int]:
    """Sorted, deduplicated ``{floor(gamma^m)} intersected with [1, horizon]``."""
    if gamma <= 1:
        raise ConfigurationError("gamma must exceed 1")
    out = []
    m = 0
    while True:
        b = _boundary(gamma, m)
        if b > horizon:
            return out
        if not out or b != out[-1]:
            out.append(b)
        m += 1


# --------------------------------------------------------------------------
# perturbations


@lru_cache(maxsize=256)
def _solve_inflation(target: float, bound_sq: float, r: int) -> tuple[float, float]:
    """Pre-truncation variance ``c`` whose ball-truncated per-coordinate variance hits ``target``.

    Uses ``E[X 1{X <= a}] = r F_{r+2}(a)`` for ``X ~ chi2_r``.  Returns
    ``(c, acceptance probability)``.
    """
    ceiling = bound_sq / (r + 2)
    if target >= ceiling:
        raise ConfigurationError(
            f"perturbation design infeasible: truncated variance cannot reach {target:g} "
            f"under norm bound^2 {bound_sq:g} (max {ceiling:g}) for r={r}"
        )

    def post_var(c):
        a = bound_sq / c
        return c * stats.chi2.cdf(a, r + 2) / stats.chi2.cdf(a, r)

    c = optimize.brentq(lambda c: post_var(c) - target, target * 1e-6, bound_sq * 1e6, xtol=1e-14, rtol=1e-13)
    return c, float(stats.chi2.cdf(bound_sq / c, r))


@dataclass(frozen=True)
class PerturbationConfig:
    """Epoch growth ``gamma`` and the design constants ``c_low < c_high``.

    In ``algorithm1`` mode draws in epoch ``m`` are truncated Gaussians with
    ``||v||^2 < rho_hi c_high s_m`` and post-truncation covariance
    ``rho_lo c_low s_m I``, where ``s_m = m^2 gamma^(-m/2)``.  ``kappa`` is the
    pre-truncation inflation over that target; ``None`` solves for it.  In
    ``restricted`` mode ``||v||^2 < rho_hi c_high gamma^-m`` and no covariance
    floor is imposed.
    """

    gamma: float = 1.2
    c_low: float = 1.0
    c_high: float = 10.0
    mode: str = "algorithm1"
    rho_lo: float = 1.2
    rho_hi: float = 0.9
    kappa: float | None = None
    r: int | None = None
    min_acceptance: float = 0.5

    def __post_init__(self):
        if self.gamma <= 1:
            raise ConfigurationError("gamma must exceed 1")
        if self.c_low <= 0 or self.c_high <= 0:
            raise ConfigurationError("c_low and c_high must be positive")
        if self.mode not in PERTURBATION_MODES:
            raise ConfigurationError(f"unknown perturbation mode {self.mode!r}")
        if not 0 < self.rho_hi < 1 or self.rho_lo < 1:
            raise ConfigurationError("margins need 0 < rho_hi < 1 <= rho_lo")
        if self.kappa is not None and self.kappa < 0:
            raise ConfigurationError("kappa must be nonnegative")
        if self.r is not None:
            self.validate(self.r)

    def validate(self, r: int) -> dict:
        """Check feasibility for input dimension ``r``; returns a margin report."""
        if not r * self.c_low < self.c_high:
            raise ConfigurationError(
                f"need r*c_low < c_high, got {r}*{self.c_low:g} >= {self.c_high:g}"
            )
        kappa, acc = self.inflation(r)
        if acc < self.min_acceptance:
            raise ConfigurationError(
                f"truncation rejects {1 - acc:.1%} of draws (limit {1 - self.min_acceptance:.0%})"
            )
        return {
            "gamma": self.gamma,
            "c_low": self.c_low,
            "c_high": self.c_high,
            "mode": self.mode,
            "r": r,
            "kappa": kappa,
            "acceptance": acc,
            "target_cov_over_scale": self.rho_lo * self.c_low,
            "bound_sq_over_scale": self.rho_hi * self.c_high,
        }

    def inflation(self, r: int) -> tuple[float, float]:
        """``(kappa, acceptance probability)`` for input dimension ``r``."""
        bound_sq = self.rho_hi * self.c_high
        if self.mode == "restricted":
            c = bound_sq / stats.chi2.ppf(0.99, r)
            kappa = c if self.kappa is None else self.kappa
            return kappa, float(stats.chi2.cdf(bound_sq / kappa, r)) if kappa > 0 else 1.0
        target = self.rho_lo * self.c_low
        if self.kappa is None:
            c, acc = _solve_inflation(target, bound_sq, r)
            return c / target, acc
        c = self.kappa * target
        return self.kappa, float(stats.chi2.cdf(bound_sq / c, r)) if c > 0 else 1.0

    def scale(self, m: int) -> float:
        """``s_m`` (algorithm1) or ``gamma^-m`` (restricted) with ``m -> max(m, 1)``."""
        m = max(m, 1)
        if self.mode == "restricted":
            return self.gamma ** (-m)
        return m * m * self.gamma ** (-m / 2)

    def bound(self, m: int) -> float:
        """Hard norm cap ``vbar_m``."""
        return math.sqrt(self.rho_hi * self.c_high * self.scale(m))

    def pre_variance(self, m: int, r: int) -> float:
        kappa, _ = self.inflation(r)
        if self.mode == "restricted":
            return kappa * self.scale(m)
        return self.rho_lo * self.c_low * kappa * self.scale(m)

    def covariance(self, m: int, r: int) -> np.ndarray:
        """Exact post-truncation covariance of a draw in epoch ``m``."""
        c = self.pre_variance(m, r)
        if c == 0:
            return np.zeros((r, r))
        a = self.bound(m) ** 2 / c
        return c * stats.chi2.cdf(a, r + 2) / stats.chi2.cdf(a, r) * np.eye(r)


def sample_perturbation(
    cfg: PerturbationConfig, m: int, r: int, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Truncated isotropic Gaussian draw(s) for epoch ``m``.

    Returns shape ``(r,)`` or ``(size, r)``; every row has norm strictly
    below ``cfg.bound(m)``.
    """
    n = 1 if size is None else size
    c = cfg.pre_variance(m, r)
    if c == 0 or n == 0:
        out = np.zeros((n, r))
        return out[0] if size is None else out
    sd = math.sqrt(c)
    bound = cfg.bound(m)
    out = np.empty((n, r))
    filled = 0
    for _ in range(_MAX_REJECTION_ROUNDS):
        need = n - filled
        draw = sd * rng.standard_normal((need + need // 4 + 1, r))
        ok = draw[np.linalg.norm(draw, axis=1) < bound][:need]
        out[filled:filled + len(ok)] = ok
        filled += len(ok)
        if filled == n:
            return out[0] if size is None else out
    raise NumericalError("perturbation rejection sampler did not terminate")


# --------------------------------------------------------------------------
# stepping


@dataclass
class Trajectory:
    """Aligned series; ``w[t]`` holds ``w(t+1)`` so that ``x[t+1] = A x[t] + B u[t] + w[t]``."""

    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    cost: np.ndarray
    gains: np.ndarray | None = None
    seed: int | None = None

    @property
    def horizon(self) -> int:
        return len(self.u)


def step(spec: SystemSpec, x, u, w) -> tuple[np.ndarray, float]:
    """One transition: ``(A x + B u + w, x'Qx + u'Ru)``."""
    A, B = spec.theta0.A, spec.theta0.B
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (spec.p,) or u.shape != (spec.r,) or w.shape != (spec.p,):
        raise ConfigurationError("state, input or noise has the wrong dimension")
    cost = float(x @ spec.cost.Q @ x + u @ spec.cost.R @ u)
    return A @ x + B @ u + w, cost


def stage_costs(spec: SystemSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorised ``x(t)'Qx(t) + u(t)'Ru(t)`` for aligned rows."""
    return np.einsum("ti,ij,tj->t", x, spec.cost.Q, x) + np.einsum("ti,ij,tj->t", u, spec.cost.R, u)


def is_stabilizing(theta: DynamicsPair, L) -> bool:
    return spectral_radius(closed_loop(theta, L)) < 1.0
