"""Blend simulated tumors into normal volumes and package training samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .shape import ShapeParams, generate_mask
from .texture import TextureParams, transform_pipeline
from .volume import BinaryMask, Volume, check_same_dims

STORAGE_DTYPE = np.float32


def blend_array(x_n, s, m, alpha):
    """``(1 - alpha*m) * x_n + alpha*m * s`` in float64 (single shared formula)."""
    am = float(alpha) * np.asarray(m, dtype=np.float64)
    return (1.0 - am) * np.asarray(x_n, dtype=np.float64) + am * np.asarray(s, dtype=np.float64)


def blend(x_n, s, m, alpha):
    """Alpha-blend tumor texture ``s`` into ``x_n`` under mask ``m``; result stored as float32."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    check_same_dims(x_n, s, m)
    out = blend_array(x_n.data, s.data, m.data, alpha).astype(STORAGE_DTYPE)
    return Volume(out, x_n.spacing)


def compose_multi(x_n, tumors, alphas, merge_rule="last-wins", k_range=(1, 15)):
    """Blend ``[(mask, texture), ...]`` one after another.

    Each tumor is blended against ``x_n`` and written over its own mask, so in
    overlaps the later tumor wins. Returns ``(x, union_mask)``.
    """
    if merge_rule != "last-wins":
        raise ValueError(f"unsupported merge rule {merge_rule!r}")
    k = len(tumors)
    if not k_range[0] <= k <= k_range[1]:
        raise ValueError(f"tumor count {k} outside allowed range {tuple(k_range)}")
    if np.ndim(alphas) == 0:
        alphas = [float(alphas)] * k
    if len(alphas) != k:
        raise ValueError("one alpha per tumor is required")
    x = np.array(x_n.data, dtype=STORAGE_DTYPE)
    union = np.zeros(x_n.dims, dtype=bool)
    for (mask, tex), a in zip(tumors, alphas):
        check_same_dims(x_n, mask, tex)
        blended = blend(x_n, tex, mask, a)
        x[mask.data] = blended.data[mask.data]
        union |= mask.data
    return Volume(x, x_n.spacing), BinaryMask(union, x_n.spacing)


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    """Blended input ``x``, normal image ``x_n``, tumor ``s``, mask ``m`` and ``alpha``."""

    x: Volume
    x_n: Volume
    s: Volume
    m: BinaryMask
    alpha: float
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        check_same_dims(self.x, self.x_n, self.s, self.m)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def residual(self):
        """Max |x - blend(x_n, s, m, alpha)| recomputed from the stored fields."""
        again = blend_array(self.x_n.data, self.s.data, self.m.data, self.alpha).astype(STORAGE_DTYPE)
        return float(np.abs(self.x.data.astype(np.float64) - again.astype(np.float64)).max())


@dataclass(frozen=True)
class GenerationConfig:
    """Everything ``generate_sample`` draws from (presets build these)."""

    shape: ShapeParams = field(default_factory=ShapeParams)
    texture: TextureParams = field(default_factory=TextureParams)
    k_range: tuple = (1, 1)
    alpha_range: tuple = (0.5, 1.0)
    allow_self_donation: bool = False

    def __post_init__(self):
        k0, k1 = self.k_range
        if not 1 <= k0 <= k1 <= 15:
            raise ValueError(f"k_range must satisfy 1 <= lo <= hi <= 15, got {self.k_range}")
        a0, a1 = self.alpha_range
        if not 0.0 <= a0 <= a1 <= 1.0:
            raise ValueError(f"alpha_range must satisfy 0 <= lo <= hi <= 1, got {self.alpha_range}")


def sample_k(k_range, rng):
    k0, k1 = (int(k) for k in k_range)
    return int(rng.integers(k0, k1 + 1))


def sample_alpha(alpha_range, rng):
    a0, a1 = alpha_range
    return float(a0) if a0 == a1 else float(rng.uniform(a0, a1))


def generate_sample(normal_pool, roi, config, rng):
    """Simulate one training sample from a pool of normal volumes.

    Draw order: target, donor, K, alpha, then per tumor the shape followed by
    the texture draws.
    """
    n = len(normal_pool)
    if n < 1 or (n < 2 and not config.allow_self_donation):
        raise ValueError(f"normal pool needs >= 2 volumes (got {n}); enable self-donation for a single volume")
    dims = normal_pool[0].dims
    for v in normal_pool:
        if v.dims != dims:
            raise ShapeMismatchError(f"pool volumes differ in dims: {v.dims} vs {dims}")
    if roi.dims != dims:
        raise ShapeMismatchError(f"roi dims {roi.dims} do not match pool dims {dims}")

    target = int(rng.integers(n))
    if n >= 2:
        donor = int(rng.integers(n - 1))
        donor += donor >= target
    else:
        donor = target
    k = sample_k(config.k_range, rng)
    alpha = sample_alpha(config.alpha_range, rng)

    x_n = normal_pool[target]
    x_donor = normal_pool[donor]
    s = np.zeros(dims, dtype=STORAGE_DTYPE)
    union = np.zeros(dims, dtype=bool)
    tumors = []
    for _ in range(k):
        mask, shape_rec = generate_mask(config.shape, roi, rng, spacing=x_n.spacing)
        tex, draw = transform_pipeline(x_donor, x_n, config.texture, rng, region=roi)
        s_k = np.where(mask.data, tex.data, 0.0).astype(STORAGE_DTYPE)
        s[mask.data] = s_k[mask.data]
        union |= mask.data
        tumors.append({"shape": shape_rec.to_dict(), "texture": draw.to_dict()})

    s_vol = Volume(s, x_n.spacing)
    m = BinaryMask(union, x_n.spacing)
    x = blend(x_n, s_vol, m, alpha)
    record = {
        "target_index": target,
        "donor_index": donor,
        "k": k,
        "alpha": alpha,
        "tumors": tumors,
    }
    return SyntheticSample(x, x_n, s_vol, m, alpha, record)


