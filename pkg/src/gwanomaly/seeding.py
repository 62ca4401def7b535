"""Fan one root seed out into independent, named sub-seeds."""
import zlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    """Deterministic 32-bit sub-seed for ``label`` under ``root``."""
    tag = zlib.crc32(label.encode("utf-8"))
    return int(np.random.SeedSequence([int(root), tag]).generate_state(1, np.uint32)[0])


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))
