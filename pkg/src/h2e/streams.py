"""Named random streams derived from one master seed.

Every consumer of randomness gets its own generator keyed by a stable
string, so adding draws to one part of a run never shifts what any other
part sees. Stream keys are hashed with sha256, which is stable across
platforms and processes (unlike hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("data", "warmup", "env-e1", "env-e2", "env-e3", "env-e4",
                "mixup", "stage2", "baseline-ce", "baseline-la",
                "baseline-smallloss")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name); same pair, same stream."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
