"""Seed handling.

Every random draw in the package goes through :func:`make_rng`, which wraps
numpy's PCG64 bit generator.  Sub-seeds for independent components are derived
from ``(seed, tag)`` with :func:`derive_seed`, so a single top-level seed
reproduces an entire experiment.
"""

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by PCG64 for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))


def derive_seed(seed, tag):
    """Deterministic 64-bit sub-seed for component ``tag`` under ``seed``.

    ``tag`` may be a string or an integer (or a tuple of those).  The mapping is
    stable across platforms and Python versions (no use of ``hash()``).
    """
    if isinstance(tag, tuple):
        out = int(seed) & SEED_MASK
        for t in tag:
            out = derive_seed(out, t)
        return out
    if isinstance(tag, str):
        key = zlib.crc32(tag.encode("utf-8"))
    else:
        key = int(tag) & 0xFFFFFFFF
    ss = np.random.SeedSequence([int(seed) & SEED_MASK, key])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
