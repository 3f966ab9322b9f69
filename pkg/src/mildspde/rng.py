"""Counter-based random streams, one per (seed, path index)."""

from __future__ import annotations

import numpy as np

_U64 = 2**64


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Philox generator keyed by the pair (seed, path_index).

    The stream of a path depends only on the key, never on how paths are
    scheduled across threads or chunks.
    """
    if not 0 <= seed < _U64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    if not 0 <= path_index < _U64:
        raise ValueError("path index must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(key=seed + path_index * _U64))
