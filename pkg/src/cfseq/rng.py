"""Named, order-independent random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for ``(root_seed, name, *keys)``; independent of call order."""
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(stream_key(name), *map(int, keys)))
    return np.random.default_rng(seq)
