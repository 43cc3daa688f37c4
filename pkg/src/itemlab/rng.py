"""Named random sub-streams derived from one 64-bit seed.

Every stream is ``default_rng(SeedSequence([seed_lo32, seed_hi32, crc32(name)]))``
so adding a stream never perturbs the others.
"""

import zlib

import numpy as np

STREAM_NAMES = (
    "data",
    "test_data",
    "noise",
    "init",
    "warmup",
    "sampler_v",
    "sampler_vtilde",
    "head_draw",
    "mixup",
    "ssl",
)

SEED_MAX = 2**64 - 1


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed, name):
    """Return the generator for sub-stream ``name`` of ``seed``."""
    seed = check_seed(seed)
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, key]))


class RngStreams:
    """Lazily created, cached generators keyed by stream name."""

    def __init__(self, seed):
        self.seed = check_seed(seed)
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            self._cache[name] = stream(self.seed, name)
        return self._cache[name]
