"""Counter-based per-path random streams.

Every simulated path owns a Philox stream keyed by (master seed, global
path index), so any single path can be regenerated in isolation and
results do not depend on how paths are partitioned into blocks or
workers.  Draws happen in a fixed chunk schedule (see ``forward``), which
is part of the reproducibility contract.
"""

from __future__ import annotations

import numpy as np


def path_generator(seed: int, index: int) -> np.random.Generator:
    """Stream for one path, reproducible in isolation."""
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def path_generators(seed: int, start: int, count: int) -> list[np.random.Generator]:
    """Streams for a contiguous block of global path indices."""
    return [path_generator(seed, start + i) for i in range(count)]


def derive_seed(seed: int, label: str) -> int:
    """Deterministic sub-seed for a named auxiliary purpose.

    Keeps auxiliary draws (pilot runs, mesh probes) out of the per-path
    key space, which uses plain integers.
    """
    digest = 1469598103934665603
    for ch in label.encode():
        digest = ((digest ^ ch) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return (int(seed) ^ digest ^ (1 << 63)) & 0xFFFFFFFFFFFFFFFF
