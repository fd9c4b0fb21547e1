"""Counter-style seed derivation.

Every random draw in the package comes from a generator keyed by
(root seed, *tags), so work can be split per video / per field / per
parameter group and produce the same bits regardless of generation order
or worker count.
"""

import numpy as np

# Stable 32-bit tags for string keys; zlib.crc32 is deterministic across
# platforms and Python versions.
import zlib


def _tag(value) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value) & 0xFFFFFFFF
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    raise TypeError(f"seed tags must be int or str, got {type(value).__name__}")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by (seed, *tags); same key, same bit stream."""
    entropy = [_tag(seed)] + [_tag(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
