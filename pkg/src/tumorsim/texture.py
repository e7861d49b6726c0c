"""Tumor texture: linear intensity transform, Gaussian blur, elastic warp.

Stages work in float64 and return float64 volumes; the composer casts to the
float32 storage precision when it builds a sample.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ._accel import njit, use_numba
from .errors import ShapeMismatchError
from .volume import Volume, check_same_dims, mean_intensity


@dataclass(frozen=True)
class TextureParams:
    ratio_range: tuple = (1.0, 3.0)
    blur_sigma_range_mm: tuple = (0.5, 1.5)
    elastic_grid_spacing: int = 8
    elastic_max_displacement: float = 3.0
    elastic_smoothing_sigma: float = 2.0
    enable_elastic: bool = True
    enable_blur: bool = True
    enable_linear: bool = True
    mean_over_roi: bool = True

    def __post_init__(self):
        a, b = self.ratio_range
        if not 0 < a <= b:
            raise ValueError(f"ratio_range must satisfy 0 < a <= b, got {self.ratio_range}")
        s0, s1 = self.blur_sigma_range_mm
        if not 0 <= s0 <= s1:
            raise ValueError(f"blur_sigma_range_mm must satisfy 0 <= lo <= hi, got {self.blur_sigma_range_mm}")
        if int(self.elastic_grid_spacing) < 4:
            raise ValueError("elastic_grid_spacing must be >= 4 voxels")
        if not 0 <= self.elastic_max_displacement < self.elastic_grid_spacing:
            raise ValueError("elastic_max_displacement must lie in [0, elastic_grid_spacing)")
        if self.elastic_smoothing_sigma < 0:
            raise ValueError("elastic_smoothing_sigma must be >= 0")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("ratio_range", "blur_sigma_range_mm"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel backward-warp offsets in voxels, shape ``dims + (3,)``."""

    offsets: np.ndarray

    def __post_init__(self):
        arr = np.array(self.offsets, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeMismatchError(f"displacement field must be (nx, ny, nz, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "offsets", arr)

    @property
    def dims(self):
        return tuple(int(n) for n in self.offsets.shape[:3])

    def max_magnitude(self):
        return float(np.sqrt((self.offsets ** 2).sum(axis=3)).max())

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(tuple(dims) + (3,)))

    @classmethod
    def constant(cls, dims, vec):
        return cls(np.broadcast_to(np.asarray(vec, dtype=np.float64), tuple(dims) + (3,)))


def uniform_open(rng, lo, hi):
    """Draw from the open interval (lo, hi); a degenerate range returns lo."""
    if lo == hi:
        return float(lo)
    while True:
        r = float(rng.uniform(lo, hi))
        if lo < r < hi:
            return r


def sample_ratio(params, rng):
    return uniform_open(rng, *params.ratio_range)


# ---------------------------------------------------------------------------
# linear transform
# ---------------------------------------------------------------------------

def linear_transform(x_src, x_ref, r, region=None):
    """``r * Mean(x_ref) / Mean(x_src) * x_src``, means over ``region`` when given."""
    if not r > 0:
        raise ValueError("ratio r must be > 0")
    check_same_dims(x_src, x_ref, region)
    mean_src = mean_intensity(x_src, region)
    if mean_src == 0:
        raise ValueError("source volume has zero mean intensity over the reference region")
    gain = r * mean_intensity(x_ref, region) / mean_src
    return Volume(gain * x_src.data.astype(np.float64), x_src.spacing)


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

def gaussian_kernel1d(sigma_vox):
    """Sampled Gaussian truncated at 3 sigma, normalised to sum 1."""
    if sigma_vox == 0:
        return np.ones(1)
    radius = int(np.ceil(3.0 * sigma_vox))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma_vox) ** 2)
    return w / w.sum()


def gaussian_blur(x, sigma_mm):
    """Separable 3D Gaussian with clamp-to-edge borders; sigma 0 is the identity."""
    if sigma_mm < 0:
        raise ValueError("sigma must be >= 0")
    if sigma_mm == 0:
        return Volume(x.data, x.spacing)
    out = x.data.astype(np.float64)
    for axis, sp in enumerate(x.spacing):
        w = gaussian_kernel1d(sigma_mm / sp)
        if len(w) > 1:
            out = ndimage.correlate1d(out, w, axis=axis, mode="nearest")
    return Volume(out, x.spacing)


# ---------------------------------------------------------------------------
# elastic deformation
# ---------------------------------------------------------------------------

@njit
def _lerp(a, b, t):
    v = a + (b - a) * t
    lo = min(a, b)
    hi = max(a, b)
    return min(max(v, lo), hi)


@njit
def _warp_numba(src, disp, out):
    nx, ny, nz = src.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = min(max(i + disp[i, j, k, 0], 0.0), nx - 1.0)
                py = min(max(j + disp[i, j, k, 1], 0.0), ny - 1.0)
                pz = min(max(k + disp[i, j, k, 2], 0.0), nz - 1.0)
                x0 = min(int(np.floor(px)), nx - 1)
                y0 = min(int(np.floor(py)), ny - 1)
                z0 = min(int(np.floor(pz)), nz - 1)
                x1 = min(x0 + 1, nx - 1)
                y1 = min(y0 + 1, ny - 1)
                z1 = min(z0 + 1, nz - 1)
                tx, ty, tz = px - x0, py - y0, pz - z0
                c00 = _lerp(src[x0, y0, z0], src[x1, y0, z0], tx)
                c10 = _lerp(src[x0, y1, z0], src[x1, y1, z0], tx)
                c01 = _lerp(src[x0, y0, z1], src[x1, y0, z1], tx)
                c11 = _lerp(src[x0, y1, z1], src[x1, y1, z1], tx)
                c0 = _lerp(c00, c10, ty)
                c1 = _lerp(c01, c11, ty)
                out[i, j, k] = _lerp(c0, c1, tz)


def _lerp_np(a, b, t):
    return np.clip(a + (b - a) * t, np.minimum(a, b), np.maximum(a, b))


def _warp_numpy(src, disp, out):
    n = np.array(src.shape)
    grid = np.indices(src.shape, dtype=np.float64)
    p = [np.clip(grid[d] + disp[..., d], 0.0, n[d] - 1.0) for d in range(3)]
    lo = [np.minimum(np.floor(p[d]).astype(np.int64), n[d] - 1) for d in range(3)]
    hi = [np.minimum(lo[d] + 1, n[d] - 1) for d in range(3)]
    t = [p[d] - lo[d] for d in range(3)]
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c00 = _lerp_np(src[x0, y0, z0], src[x1, y0, z0], t[0])
    c10 = _lerp_np(src[x0, y1, z0], src[x1, y1, z0], t[0])
    c01 = _lerp_np(src[x0, y0, z1], src[x1, y0, z1], t[0])
    c11 = _lerp_np(src[x0, y1, z1], src[x1, y1, z1], t[0])
    out[...] = _lerp_np(_lerp_np(c00, c10, t[1]), _lerp_np(c01, c11, t[1]), t[2])


def elastic_deform(x, field):
    """Backward warp ``out(p) = x(p + field(p))``, trilinear, clamp-to-edge."""
    if field.dims != x.dims:
        raise ShapeMismatchError(f"displacement dims {field.dims} do not match volume dims {x.dims}")
    src = np.ascontiguousarray(x.data, dtype=np.float64)
    out = np.empty_like(src)
    kernel = _warp_numba if use_numba() else _warp_numpy
    kernel(src, np.ascontiguousarray(field.offsets), out)
    return Volume(out, x.spacing)


def make_displacement(params, rng, dims):
    """Smooth random field whose largest vector has length ``elastic_max_displacement``.

    Uniform(-1, 1) offsets on a control grid (``elastic_grid_spacing`` voxels
    apart) are Gaussian-smoothed, trilinearly upsampled and rescaled.
    """
    dims = tuple(int(n) for n in dims)
    step = int(params.elastic_grid_spacing)
    ctrl_dims = tuple(int(np.ceil((n - 1) / step)) + 1 for n in dims)
    ctrl = rng.uniform(-1.0, 1.0, size=ctrl_dims + (3,))
    sigma_ctrl = params.elastic_smoothing_sigma / step
    if sigma_ctrl > 0:
        for c in range(3):
            ctrl[..., c] = ndimage.gaussian_filter(ctrl[..., c], sigma_ctrl, mode="nearest", truncate=3.0)
    coords = np.indices(dims, dtype=np.float64) / step
    dense = np.stack(
        [ndimage.map_coordinates(ctrl[..., c], coords, order=1, mode="nearest") for c in range(3)],
        axis=-1)
    peak = np.sqrt((dense ** 2).sum(axis=3)).max()
    if peak > 0:
        dense *= params.elastic_max_displacement / peak
    return DisplacementField(dense)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextureDraw:
    ratio: float | None
    blur_sigma_mm: float | None
    elastic_max_displacement: float | None
    mean_region: str

    def to_dict(self):
        return asdict(self)


def transform_pipeline(x_src, x_ref, params, rng, region=None):
    """Elastic warp, then blur, then the linear transform against ``x_ref``.

    Disabled stages are skipped. Draw order: displacement field, blur sigma,
    ratio. Returns ``(volume, TextureDraw)``.
    """
    check_same_dims(x_src, x_ref, region)
    if not params.mean_over_roi:
        region = None
    out = Volume(x_src.data.astype(np.float64), x_src.spacing)
    disp = sigma = ratio = None
    if params.enable_elastic:
        field = make_displacement(params, rng, x_src.dims)
        disp = field.max_magnitude()
        out = elastic_deform(out, field)
    if params.enable_blur:
        sigma = uniform_open(rng, *params.blur_sigma_range_mm)
        out = gaussian_blur(out, sigma)
    if params.enable_linear:
        ratio = sample_ratio(params, rng)
        out = linear_transform(out, x_ref, ratio, region)
    draw = TextureDraw(ratio, sigma, disp, "roi" if region is not None else "volume")
    return out, draw


def tumor_texture(m, tex):
    """``s = m * tex`` elementwise (zero outside the mask)."""
    check_same_dims(m, tex)
    data = np.where(m.data, tex.data, 0).astype(tex.data.dtype)
    return Volume(data, tex.spacing)
