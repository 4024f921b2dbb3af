"""Deterministic random-stream derivation.

Every stochastic component draws from a generator derived here, keyed by its
position in the run (round, slot, purpose). Streams are re-derivable from the
run seed alone, which is what makes kill-and-resume replay exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Fixed purpose codes for spawn keys. Never renumber: ledger reproducibility
# across versions depends on these.
STREAM_GENERATE = 1
STREAM_OPTIMIZE = 2
STREAM_ANALYZE = 3
STREAM_BOOTSTRAP = 4


def substream(seed: int, *key: int) -> np.random.Generator:
    """Child generator at a fixed position in the seed tree."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def digest_int(*parts) -> int:
    """Stable non-negative integer digest of the given parts.

    Process-independent (unlike hash()), so it is safe to key noise draws
    and seed trees with it.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "big")
