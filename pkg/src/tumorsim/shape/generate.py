"""Random tumor shapes: ROI center sampling and the full mask pipeline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..volume import BinaryMask
from .mesh import icosphere, perturb_mesh, place_mesh, radii_digest, random_quaternion
from .noise import NoiseParams
from .voxelize import voxelize


@dataclass(frozen=True)
class ShapeParams:
    """Shape sampling ranges.

    ``scale_range`` applies independently to each axis (log-uniform draw);
    ``rotation`` is a unit quaternion ``(w, x, y, z)`` or ``"random"``.
    The ``seed`` of ``noise`` is replaced by a fresh draw for every shape.
    """

    subdivision_level: int = 3
    radius_range_mm: tuple = (4.0, 10.0)
    scale_range: tuple = (0.75, 1.0 / 0.75)
    rotation: object = "random"
    noise: NoiseParams = field(default_factory=NoiseParams)
    clip_to_roi: bool = False

    def __post_init__(self):
        r0, r1 = self.radius_range_mm
        if not 0 < r0 <= r1:
            raise ValueError(f"radius_range_mm must satisfy 0 < min <= max, got {self.radius_range_mm}")
        s0, s1 = self.scale_range
        if not 0 < s0 <= s1:
            raise ValueError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        if not 0 <= int(self.subdivision_level) <= 6:
            raise ValueError("subdivision_level must lie in [0, 6]")
        if not isinstance(self.rotation, str):
            q = np.asarray(self.rotation, dtype=np.float64)
            if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ValueError("rotation must be a unit quaternion (w, x, y, z) or 'random'")
        elif self.rotation != "random":
            raise ValueError(f"unknown rotation mode {self.rotation!r}")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "noise" in doc and isinstance(doc["noise"], dict):
            doc["noise"] = NoiseParams(**doc["noise"])
        for key in ("radius_range_mm", "scale_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "rotation" in doc and not isinstance(doc["rotation"], str):
            doc["rotation"] = tuple(doc["rotation"])
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ShapeRecord:
    center_voxel: tuple
    radius_mm: float
    scale: tuple
    quaternion: tuple
    noise: dict
    subdivision_level: int
    radii_digest: str
    voxel_count: int

    def to_dict(self):
        return asdict(self)


def sample_center(roi, rng):
    """Uniformly random voxel coordinate among the ROI's nonzero voxels."""
    flat = np.flatnonzero(roi.data)
    if flat.size == 0:
        raise ValueError("cannot sample a center from an empty ROI")
    pick = flat[rng.integers(flat.size)]
    return tuple(int(c) for c in np.unravel_index(pick, roi.dims))


def _log_uniform(rng, lo, hi, size=None):
    if lo == hi:
        return np.full(size, float(lo)) if size else float(lo)
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def generate_mask(params, roi, rng, spacing=None):
    """Draw one tumor mask inside the grid of ``roi``.

    Draw order (fixed, for reproducibility): center, radius, per-axis scale,
    rotation, noise seed.
    """
    spacing = tuple(roi.spacing if spacing is None else spacing)
    center = sample_center(roi, rng)
    r0, r1 = params.radius_range_mm
    radius = float(rng.uniform(r0, r1)) if r1 > r0 else float(r0)
    scale = tuple(float(s) for s in _log_uniform(rng, *params.scale_range, size=3))
    if isinstance(params.rotation, str):
        quat = random_quaternion(rng)
    else:
        quat = np.asarray(params.rotation, dtype=np.float64)
    seed = int(rng.integers(0, 2 ** 63, dtype=np.int64))
    noise = replace(params.noise, seed=seed)

    sphere = icosphere(params.subdivision_level)
    shaped = perturb_mesh(sphere, noise)
    placed = place_mesh(shaped, center, radius, scale, quat, spacing)
    mask = voxelize(placed, roi.dims, spacing)
    if params.clip_to_roi:
        mask = BinaryMask(mask.data & roi.data, spacing)
    record = ShapeRecord(
        center_voxel=center,
        radius_mm=radius,
        scale=scale,
        quaternion=tuple(float(c) for c in quat),
        noise=asdict(noise),
        subdivision_level=int(params.subdivision_level),
        radii_digest=radii_digest(shaped),
        voxel_count=mask.count,
    )
    return mask, record
