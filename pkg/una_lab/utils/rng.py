import zlib
from typing import Union

import numpy as np


def _stream_key(label: Union[int, str]) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label) % (1 << 32)


def make_rng(seed: int, *stream: Union[int, str]) -> np.random.Generator:
    """Counter-based Philox generator for ``seed``.

    ``stream`` labels derive independent, reproducible sub-streams (one per
    purpose: shuffling, online sampling, variance estimates) from the same seed.
    """
    ss = np.random.SeedSequence(
        entropy=int(seed) % (1 << 64),
        spawn_key=tuple(_stream_key(s) for s in stream),
    )
    return np.random.Generator(np.random.Philox(ss))
