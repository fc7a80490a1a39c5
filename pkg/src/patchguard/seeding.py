"""Deterministic random-number streams.

All stochastic code in the package draws from generators produced here.
A stream is addressed by a 64-bit base seed plus any number of string or
integer tags; the same (seed, tags) always yields the same generator, and
distinct tags yield statistically independent streams. Tags are hashed with
crc32 so stream identity is stable across processes and platforms.
"""

import zlib

import numpy as np

__all__ = ["rng_for", "derive_seed"]

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(seed: int, *tags) -> int:
    """Collapse (seed, tags) into a single 64-bit child seed."""
    ss = np.random.SeedSequence([int(seed) & _MASK64] + [_tag_to_int(t) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Generator for the stream addressed by (seed, tags)."""
    ss = np.random.SeedSequence([int(seed) & _MASK64] + [_tag_to_int(t) for t in tags])
    return np.random.default_rng(ss)
