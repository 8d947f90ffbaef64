import hashlib

import numpy as np


def derive_seed(root: int, *purpose) -> int:
    """Named 64-bit sub-seed: ``hash(root, purpose...)``."""
    h = hashlib.sha256(str(int(root)).encode())
    for part in purpose:
        h.update(b"\x00")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(root: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *purpose))
