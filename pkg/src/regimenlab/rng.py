"""Deterministic substreamed random number generation.

Every stochastic operation in the toolkit draws from a named substream of a
counter-based Philox generator. Substreams are derived purely from content
(base seed plus a path of labels), never from shared sequential state, so a
cohort generated across 8 workers is bit-identical to one generated serially.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def _encode(part: int | str) -> int:
    """Map a path element to a stable 64-bit integer."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for the substream named by (seed, *path).

    The same (seed, path) always yields the same stream, independent of how
    many other substreams were created before it.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_encode(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
