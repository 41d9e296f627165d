"""Named counter-based random streams.

Every random draw in the library comes from a Philox stream addressed by
(seed, *path), where path components are small ints or short names.  Philox
is counter-based, so streams for different paths are independent and the
order in which they are created or consumed cannot perturb one another --
the property the deployment loop and the parallel trial harness rely on.
"""

from __future__ import annotations

import numpy as np


def _as_entropy(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            value = -2 * value - 1  # fold negatives into distinct non-negatives
        return value
    if isinstance(part, str):
        return int.from_bytes(part.encode("utf-8"), "little")
    raise TypeError(f"stream path components must be int or str, got {type(part).__name__}")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for the (seed, *path) stream.

    Identical arguments always reproduce the identical stream; distinct
    paths give statistically independent streams.
    """
    entropy = [_as_entropy(seed)] + [_as_entropy(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: int | str) -> int:
    """A 63-bit child seed for code that takes a plain integer seed."""
    entropy = [_as_entropy(seed)] + [_as_entropy(p) for p in path]
    state = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
    return int(state) >> 1
