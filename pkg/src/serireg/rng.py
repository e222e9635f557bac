"""Counter-based random substreams.

Each draw site gets its own Philox generator keyed by ``(seed, slice, purpose)``,
so a slice's randomness never depends on evaluation order or thread count.
"""

import numpy as np

ALGORITHM = "philox4x64-10/numpy-generator"

PURPOSES = {"rigid": 1, "elastic": 2, "intensity": 3, "drop": 4, "phantom": 5, "texture": 6}

_MASK64 = (1 << 64) - 1


def substream(seed, index, purpose):
    """A fresh ``numpy.random.Generator`` for one ``(seed, index, purpose)`` key."""
    if purpose not in PURPOSES:
        raise ValueError(f"unknown random purpose {purpose!r}")
    if index < 0 or index >= 1 << 32:
        raise ValueError(f"substream index out of range: {index}")
    key = np.array([int(seed) & _MASK64, (PURPOSES[purpose] << 32) | int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
