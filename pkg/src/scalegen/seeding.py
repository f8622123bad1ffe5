"""Named random substreams derived from a single root seed.

Every random draw in the package flows from one integer seed through named
substreams, so any sample is addressable as (seed, *path) and parallel workers
can be given disjoint streams without coordination.
"""

import hashlib

import numpy as np


def _entropy_token(token) -> int:
    """Map a path element (int or str) to a stable 64-bit entropy word."""
    if isinstance(token, (int, np.integer)):
        value = int(token)
        if value < 0:
            raise ValueError(f"seed path ints must be non-negative, got {value}")
        return value
    digest = hashlib.sha256(str(token).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(root_seed: int, *path) -> np.random.SeedSequence:
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    return np.random.SeedSequence([int(root_seed)] + [_entropy_token(t) for t in path])


def substream(root_seed: int, *path) -> np.random.Generator:
    """Independent generator for the named substream (seed, *path)."""
    return np.random.default_rng(seed_sequence(root_seed, *path))


def stream_int(root_seed: int, *path) -> int:
    """32-bit integer seed for libraries that want a plain int (e.g. torch)."""
    return int(seed_sequence(root_seed, *path).generate_state(1, np.uint32)[0])
