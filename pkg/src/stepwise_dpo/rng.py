"""Named RNG streams derived from one master seed."""

import hashlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; stable across runs and platforms."""
    key = "/".join(str(n) for n in names).encode()
    digest = hashlib.sha256(key).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))
