"""Named substreams derived from one master seed.

All randomness in the pipeline flows from a single u64 master seed through
substreams addressed by (name, index...) keys, so any stage can be re-run
in isolation and reproduce its draws bit-for-bit.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def substream(master_seed, *keys) -> np.random.Generator:
    """Deterministic generator for the substream addressed by ``keys``."""
    entropy = [int(master_seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(master_seed, *keys) -> int:
    """A u64 seed for the substream, for APIs that take seeds rather than rngs."""
    entropy = [int(master_seed)] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
