"""Per-replicate random streams.

Every replicate seed is expanded through ``numpy.random.SeedSequence`` into
independent children, one per consumer, so noise, perturbations, baseline
randomisation and the bootstrap never share state.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("noise", "perturbation", "baseline", "bootstrap")


def replicate_seed(base_seed: int, replicate_id: int) -> int:
    """``base_seed XOR replicate_id``."""
    return int(base_seed) ^ int(replicate_id)


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}
