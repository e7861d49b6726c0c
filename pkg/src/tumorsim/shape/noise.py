"""Seeded 3D gradient simplex noise with a fractal (multi-octave) sum."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .._accel import njit, use_numba

_MASK64 = (1 << 64) - 1
_F3 = 1.0 / 3.0
_G3 = 1.0 / 6.0
_LACUNARITY = 2.0
MAX_OCTAVES = 8

GRAD3 = np.array([
    [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
    [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
    [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
], dtype=np.float64)

# (i1, j1, k1, i2, j2, k2) per ordering of (x0, y0, z0); rows follow the
# branch order of _simplex_point
_SIMPLEX_OFFSETS = np.array([
    [1, 0, 0, 1, 1, 0],
    [1, 0, 0, 1, 0, 1],
    [0, 0, 1, 1, 0, 1],
    [0, 0, 1, 0, 1, 1],
    [0, 1, 0, 0, 1, 1],
    [0, 1, 0, 1, 1, 0],
], dtype=np.int64)


@dataclass(frozen=True)
class NoiseParams:
    seed: int = 0
    frequency: float = 2.0
    amplitude: float = 0.35
    octaves: int = 3
    persistence: float = 0.5

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if not self.frequency > 0:
            raise ValueError("frequency must be > 0")
        if not 0 <= self.amplitude <= 0.9:
            raise ValueError("amplitude must lie in [0, 0.9]")
        if not 1 <= int(self.octaves) <= MAX_OCTAVES:
            raise ValueError(f"octaves must lie in [1, {MAX_OCTAVES}]")
        if not 0 < self.persistence <= 1:
            raise ValueError("persistence must lie in (0, 1]")

    @property
    def octave_bound(self):
        """Upper bound on ``|fractal noise|``: sum of persistence**k."""
        return float(sum(self.persistence ** k for k in range(int(self.octaves))))


def splitmix64(state):
    """One splitmix64 step on a python int; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@lru_cache(maxsize=256)
def _permutation_cached(seed):
    perm = list(range(256))
    state = seed
    for i in range(255, 0, -1):
        state, out = splitmix64(state)
        j = out % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    table = np.array(perm + perm, dtype=np.int64)
    table.flags.writeable = False
    return table


def permutation(seed):
    """512-entry table (a seeded shuffle of 0..255, repeated twice)."""
    return _permutation_cached(int(seed) & _MASK64)


# ---------------------------------------------------------------------------
# numba kernel
# ---------------------------------------------------------------------------

@njit
def _corner(t, gi, grad, x, y, z):
    if t < 0.0:
        return 0.0
    t *= t
    return t * t * (grad[gi, 0] * x + grad[gi, 1] * y + grad[gi, 2] * z)


@njit
def _simplex_point(x, y, z, perm, grad):
    s = (x + y + z) * _F3
    i = np.floor(x + s)
    j = np.floor(y + s)
    k = np.floor(z + s)
    t = (i + j + k) * _G3
    x0 = x - (i - t)
    y0 = y - (j - t)
    z0 = z - (k - t)
    if x0 >= y0:
        if y0 >= z0:
            i1, j1, k1, i2, j2, k2 = 1, 0, 0, 1, 1, 0
        elif x0 >= z0:
            i1, j1, k1, i2, j2, k2 = 1, 0, 0, 1, 0, 1
        else:
            i1, j1, k1, i2, j2, k2 = 0, 0, 1, 1, 0, 1
    else:
        if y0 < z0:
            i1, j1, k1, i2, j2, k2 = 0, 0, 1, 0, 1, 1
        elif x0 < z0:
            i1, j1, k1, i2, j2, k2 = 0, 1, 0, 0, 1, 1
        else:
            i1, j1, k1, i2, j2, k2 = 0, 1, 0, 1, 1, 0
    x1 = x0 - i1 + _G3
    y1 = y0 - j1 + _G3
    z1 = z0 - k1 + _G3
    x2 = x0 - i2 + 2.0 * _G3
    y2 = y0 - j2 + 2.0 * _G3
    z2 = z0 - k2 + 2.0 * _G3
    x3 = x0 - 1.0 + 3.0 * _G3
    y3 = y0 - 1.0 + 3.0 * _G3
    z3 = z0 - 1.0 + 3.0 * _G3
    ii = int(i) & 255
    jj = int(j) & 255
    kk = int(k) & 255
    g0 = perm[ii + perm[jj + perm[kk]]] % 12
    g1 = perm[ii + i1 + perm[jj + j1 + perm[kk + k1]]] % 12
    g2 = perm[ii + i2 + perm[jj + j2 + perm[kk + k2]]] % 12
    g3 = perm[ii + 1 + perm[jj + 1 + perm[kk + 1]]] % 12
    n = _corner(0.6 - x0 * x0 - y0 * y0 - z0 * z0, g0, grad, x0, y0, z0)
    n += _corner(0.6 - x1 * x1 - y1 * y1 - z1 * z1, g1, grad, x1, y1, z1)
    n += _corner(0.6 - x2 * x2 - y2 * y2 - z2 * z2, g2, grad, x2, y2, z2)
    n += _corner(0.6 - x3 * x3 - y3 * y3 - z3 * z3, g3, grad, x3, y3, z3)
    return 32.0 * n


@njit
def _fractal_numba(points, perm, grad, frequency, octaves, persistence):
    out = np.empty(points.shape[0])
    for p in range(points.shape[0]):
        total = 0.0
        amp = 1.0
        f = frequency
        for _ in range(octaves):
            total += amp * _simplex_point(points[p, 0] * f, points[p, 1] * f, points[p, 2] * f, perm, grad)
            amp *= persistence
            f *= _LACUNARITY
        out[p] = total
    return out


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _simplex_numpy(x, y, z, perm):
    s = (x + y + z) * _F3
    i = np.floor(x + s)
    j = np.floor(y + s)
    k = np.floor(z + s)
    t = (i + j + k) * _G3
    x0 = x - (i - t)
    y0 = y - (j - t)
    z0 = z - (k - t)

    xy, yz, xz = x0 >= y0, y0 >= z0, x0 >= z0
    case = np.select(
        [xy & yz, xy & xz, xy, ~yz, ~xz],
        [0, 1, 2, 3, 4],
        default=5,
    )
    off = _SIMPLEX_OFFSETS[case]
    i1, j1, k1, i2, j2, k2 = (off[:, c] for c in range(6))

    ii = i.astype(np.int64) & 255
    jj = j.astype(np.int64) & 255
    kk = k.astype(np.int64) & 255
    corners = (
        (x0, y0, z0, 0, 0, 0),
        (x0 - i1 + _G3, y0 - j1 + _G3, z0 - k1 + _G3, i1, j1, k1),
        (x0 - i2 + 2.0 * _G3, y0 - j2 + 2.0 * _G3, z0 - k2 + 2.0 * _G3, i2, j2, k2),
        (x0 - 1.0 + 3.0 * _G3, y0 - 1.0 + 3.0 * _G3, z0 - 1.0 + 3.0 * _G3, 1, 1, 1),
    )
    n = np.zeros_like(x)
    for cx, cy, cz, oi, oj, ok in corners:
        gi = perm[ii + oi + perm[jj + oj + perm[kk + ok]]] % 12
        g = GRAD3[gi]
        tt = 0.6 - cx * cx - cy * cy - cz * cz
        t2 = tt * tt
        contrib = t2 * t2 * (g[:, 0] * cx + g[:, 1] * cy + g[:, 2] * cz)
        n += np.where(tt < 0.0, 0.0, contrib)
    return 32.0 * n


def _fractal_numpy(points, perm, frequency, octaves, persistence):
    total = np.zeros(points.shape[0])
    amp = 1.0
    f = frequency
    for _ in range(octaves):
        total += amp * _simplex_numpy(points[:, 0] * f, points[:, 1] * f, points[:, 2] * f, perm)
        amp *= persistence
        f *= _LACUNARITY
    return total


def simplex_noise(p, params):
    """Fractal simplex noise at point(s) ``p`` (shape ``(3,)`` or ``(n, 3)``).

    Octave ``k`` samples at ``frequency * 2**k`` with weight ``persistence**k``,
    so ``|n(p)| <= params.octave_bound``. A single octave lies in [-1, 1].
    """
    pts = np.asarray(p, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.ascontiguousarray(np.atleast_2d(pts))
    if pts.shape[1] != 3:
        raise ValueError(f"points must have 3 coordinates, got shape {pts.shape}")
    perm = permutation(params.seed)
    if use_numba():
        out = _fractal_numba(pts, perm, GRAD3, float(params.frequency), int(params.octaves),
                             float(params.persistence))
    else:
        out = _fractal_numpy(pts, perm, float(params.frequency), int(params.octaves),
                             float(params.persistence))
    return float(out[0]) if scalar else out
