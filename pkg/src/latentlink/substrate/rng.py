"""Named random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(root_seed: int, *names) -> np.random.Generator:
    """Independent generator for the path ``names`` (e.g. ``stream(7, "env", 3)``).

    The same (seed, names) always yields the same sequence, and distinct
    names never share state.
    """
    keys = tuple(_key(n) if isinstance(n, str) else int(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(root_seed), spawn_key=keys)))


def derive_seed(root_seed: int, *names) -> int:
    return int(stream(root_seed, *names).integers(0, 2 ** 31 - 1))


class Streams:
    """Holds the per-purpose generators of a run: env, init, sampling, channel, ..."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._cache: dict = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            self._cache[name] = stream(self.root_seed, name)
        return self._cache[name]

    def fresh(self, *names) -> np.random.Generator:
        return stream(self.root_seed, *names)
