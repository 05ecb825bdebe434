"""Named, counter-based random substreams.

Every consumer of randomness asks for ``substream(seed, "name", *counters)``
instead of sharing one generator, so results do not depend on call order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, _key(name)] + [int(c) for c in counters]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
