"""Deterministic named PRNG streams.

One documented 64-bit root seed fans out into independent PCG64 streams
keyed by string labels (``init``, ``batch``, ``negatives``, ``synth``, plus
grid-search setting keys). Labels are hashed with SHA-256 into the
SeedSequence entropy, so a stream depends only on (seed, labels) — never on
enumeration order, platform, or process layout.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for (seed, labels...)."""
    words = []
    for label in labels:
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words.extend(
            int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)
        )
    ss = np.random.SeedSequence(entropy=[int(seed) & _MASK64, *words])
    return np.random.Generator(np.random.PCG64(ss))
