"""Segmentation metrics: Dice, sensitivity, specificity, HD95.

Undefined values (zero denominators, empty surfaces) are ``None`` rather than
NaN so batch summaries never average a silent NaN.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ._accel import njit, use_numba
from .volume import check_same_dims

CSV_COLUMNS = ("dice", "sensitivity", "specificity", "hd95_mm")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    dice: float
    sensitivity: float | None
    specificity: float | None
    hd95_mm: float | None

    def to_dict(self):
        return asdict(self)

    def csv_row(self):
        return ["" if v is None else repr(float(v)) for v in (self.dice, self.sensitivity,
                                                             self.specificity, self.hd95_mm)]


def _bool(m):
    return np.asarray(getattr(m, "data", m), dtype=bool)


def confusion(pred, gt):
    p, g = _bool(pred), _bool(gt)
    check_same_dims(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def dice(c):
    """``2TP / (FP + 2TP + FN)``; two empty masks score 1.0."""
    den = c.fp + 2 * c.tp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def sensitivity(c):
    den = c.tp + c.fn
    return None if den == 0 else c.tp / den


def specificity(c):
    den = c.tn + c.fp
    return None if den == 0 else c.tn / den


def surface_mask(m):
    """Foreground voxels with a background 6-neighbour (outside the grid counts as background)."""
    a = _bool(m)
    padded = np.pad(a, 1, constant_values=False)
    interior = a.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return a & ~interior


def surface_voxels(m):
    """``(k, 3)`` integer coordinates of the surface voxels, C order."""
    return np.argwhere(surface_mask(m))


def nearest_rank(values, percentile):
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    p = float(percentile)
    if p == int(p):
        rank = (int(p) * v.size + 99) // 100
    else:
        rank = math.ceil(p / 100.0 * v.size)
    return float(v[max(rank, 1) - 1])


def _spacing(spacing, m):
    if spacing is None:
        spacing = getattr(m, "spacing", (1.0, 1.0, 1.0))
    return np.asarray(spacing, dtype=np.float64)


def _pair_distance(a, b, sp):
    d = (a - b) * sp
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def directed_surface_distances(src, dst, spacing=None):
    """For every surface voxel of ``src``: distance (mm) to the nearest surface voxel of ``dst``.

    Nearest voxels come from scipy's exact Euclidean feature transform.
    """
    sp = _spacing(spacing, src)
    s_src, s_dst = surface_mask(src), surface_mask(dst)
    pts = np.argwhere(s_src)
    if pts.size == 0 or not s_dst.any():
        return np.empty(0)
    idx = ndimage.distance_transform_edt(~s_dst, sampling=sp, return_distances=False, return_indices=True)
    nearest = idx[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    return _pair_distance(pts.astype(np.float64), nearest.astype(np.float64), sp)


def hausdorff(pred, gt, spacing=None, percentile=95.0):
    """Max of the two directed nearest-rank percentiles; ``None`` if either surface is empty."""
    check_same_dims(_bool(pred), _bool(gt))
    if not surface_mask(pred).any() or not surface_mask(gt).any():
        return None
    d_pg = directed_surface_distances(pred, gt, spacing)
    d_gp = directed_surface_distances(gt, pred, spacing)
    return max(nearest_rank(d_pg, percentile), nearest_rank(d_gp, percentile))


def hd95(pred, gt, spacing=None):
    return hausdorff(pred, gt, spacing, 95.0)


# ---------------------------------------------------------------------------
# all-pairs oracle
# ---------------------------------------------------------------------------

@njit
def _min_dist_numba(src, dst, sp):
    out = np.empty(src.shape[0])
    for i in range(src.shape[0]):
        best = np.inf
        for j in range(dst.shape[0]):
            dx = (src[i, 0] - dst[j, 0]) * sp[0]
            dy = (src[i, 1] - dst[j, 1]) * sp[1]
            dz = (src[i, 2] - dst[j, 2]) * sp[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out


def _min_dist_numpy(src, dst, sp, chunk=512):
    out = np.empty(len(src))
    for s in range(0, len(src), chunk):
        d = (src[s:s + chunk, None, :] - dst[None, :, :]) * sp
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def brute_force_surface_distances(src, dst, spacing=None):
    sp = _spacing(spacing, src)
    a = surface_voxels(src).astype(np.float64)
    b = surface_voxels(dst).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        return np.empty(0)
    fn = _min_dist_numba if use_numba() else _min_dist_numpy
    return fn(a, b, sp)


def hausdorff_bruteforce(pred, gt, spacing=None, percentile=95.0):
    """O(|X| |Y|) reference for :func:`hausdorff`."""
    a = brute_force_surface_distances(pred, gt, spacing)
    b = brute_force_surface_distances(gt, pred, spacing)
    if a.size == 0 or b.size == 0:
        return None
    return max(nearest_rank(a, percentile), nearest_rank(b, percentile))


def evaluate(pred, gt, spacing=None):
    c = confusion(pred, gt)
    return MetricReport(dice(c), sensitivity(c), specificity(c), hd95(pred, gt, spacing))


def summarize(reports):
    """Per-column mean and sample std (n - 1) over defined values."""
    out = {}
    for col in CSV_COLUMNS:
        vals = np.array([getattr(r, col) for r in reports if getattr(r, col) is not None], dtype=np.float64)
        out[col] = {
            "n": int(vals.size),
            "mean": float(vals.mean()) if vals.size else None,
            "std": float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size == 1 else None),
        }
    return out
