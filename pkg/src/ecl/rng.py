"""Named random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("env", "collect", "training", "discovery", "exploration", "planning", "eval")


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; identical ``(seed, name)`` gives identical draws."""
    return np.random.default_rng(stream_seed(seed, name))


def stream_log(seed: int, names=STREAMS):
    """Entropy words of each named stream, for the run manifest."""
    return {n: [int(seed), zlib.crc32(n.encode())] for n in names}
