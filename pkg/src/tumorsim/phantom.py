"""Synthetic "normal organ" volumes for demos and tests."""
import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume


def organ_roi(dims, spacing=(1.0, 1.0, 1.0), fill=0.8):
    """Axis-aligned ellipsoid covering ``fill`` of each half-extent."""
    idx = np.indices(dims, dtype=np.float64)
    c = (np.asarray(dims) - 1) / 2.0
    half = np.maximum(np.asarray(dims) * fill / 2.0, 1.0)
    r2 = sum(((idx[d] - c[d]) / half[d]) ** 2 for d in range(3))
    return BinaryMask(r2 <= 1.0, spacing)


def make_pool(count, dims, seed=0, spacing=(1.0, 1.0, 1.0), organ_level=1.0, background=0.2):
    """``count`` textured organ volumes sharing one ellipsoidal ROI.

    Organ voxels sit around ``organ_level`` with smooth +-10 % texture.
    """
    rng = np.random.default_rng(seed)
    roi = organ_roi(dims, spacing)
    pool = []
    for _ in range(count):
        tex = ndimage.gaussian_filter(rng.standard_normal(dims), 1.5, mode="nearest")
        tex *= 0.1 / max(np.abs(tex).max(), 1e-12)
        level = organ_level * rng.uniform(0.9, 1.1)
        data = np.where(roi.data, level + tex, background + 0.25 * tex)
        pool.append(Volume(data.astype(np.float32), spacing))
    return pool, roi
