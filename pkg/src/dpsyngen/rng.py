"""Named random streams derived from a single master seed."""

import zlib

import numpy as np

STREAMS = ("data", "init", "sigma", "dp-noise", "sampler")


def stream(seed, name, *extra):
    """Return a Generator for the stream ``name`` under ``seed``.

    Each (seed, name, *extra) combination yields an independent, reproducible
    stream, so one component's randomness can be varied without disturbing
    the others.
    """
    key = [int(seed), zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))


class SeedSplitter:
    """Hands out the standard named streams for one experiment seed."""

    def __init__(self, seed):
        self.seed = int(seed)

    def __call__(self, name, *extra):
        return stream(self.seed, name, *extra)

    def __repr__(self):
        return f"SeedSplitter(seed={self.seed})"
