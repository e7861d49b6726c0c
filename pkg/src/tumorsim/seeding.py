"""Per-sample random streams derived from one master seed."""
import hashlib
from pathlib import Path

import numpy as np


def sample_rng(master_seed, index):
    """Counter-based (Philox) stream for sample ``index``; independent of scheduling."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def file_digest(path):
    """64-bit BLAKE2b digest (hex) of a file's bytes."""
    h = hashlib.blake2b(digest_size=8)
    with open(Path(path), "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
