"""Named sub-seeds derived from one experiment seed."""
import hashlib

import numpy as np


def sub_seed(seed: int, component: str) -> int:
    """64-bit seed for ``component``: blake2b-64 of ``"{seed}/{component}"``, little-endian."""
    digest = hashlib.blake2b(f"{int(seed)}/{component}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, component))
