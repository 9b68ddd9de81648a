"""Named system instances and a random stable-system generator."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .riccati import CostPair, DynamicsPair, spectral_radius

# 3x3 benchmark instance, entries exactly as printed to two decimals
BENCHMARK_3X3 = {
    "A": [
        [0.13, 0.35, -0.26],
        [-1.34, -0.30, -1.75],
        [1.18, 0.00, -0.29],
    ],
    "B": [
        [-0.83, -0.53, 0.52],
        [-0.98, -2.00, 0.00],
        [-1.16, 0.96, -0.04],
    ],
    "Q": [
        [0.79, -0.15, 0.09],
        [-0.15, 0.60, -0.04],
        [0.09, -0.04, 0.61],
    ],
    "R": [
        [0.52, -0.06, -0.07],
        [-0.06, 0.39, -0.04],
        [-0.07, -0.04, 0.67],
    ],
}

PRESETS = {"paper-eq11": BENCHMARK_3X3}


def preset(name: str) -> tuple[DynamicsPair, CostPair]:
    try:
        m = PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None
    return DynamicsPair(np.array(m["A"]), np.array(m["B"])), CostPair(np.array(m["Q"]), np.array(m["R"]))


def _random_spd(n, rng, floor=0.2):
    G = rng.standard_normal((n, n))
    return G @ G.T / n + floor * np.eye(n)


def random_stable_system(
    p: int, r: int, rng: np.random.Generator, radius: float = 0.9
) -> tuple[DynamicsPair, CostPair]:
    """Random ``(A, B, Q, R)`` with ``rho(A) <= radius`` and SPD costs."""
    if not 0 < radius < 1:
        raise ConfigurationError("radius must lie in (0, 1)")
    A = rng.standard_normal((p, p))
    rho = spectral_radius(A)
    A *= radius * rng.uniform(0.3, 1.0) / max(rho, 1e-12)
    B = rng.standard_normal((p, r))
    return DynamicsPair(A, B), CostPair(_random_spd(p, rng), _random_spd(r, rng))
