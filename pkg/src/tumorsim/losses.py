"""Layer-decomposition losses with analytic gradients.

Terms (all reductions are means over voxels):

* ``l0 = mean|x_hat - x_n|``           normal-organ reconstruction
* ``l1 = mean|s_hat - s|``             tumor reconstruction
* ``l2 = 1 - (2 sum(m_hat*m) + eps) / (sum(m_hat) + sum(m) + eps)``  soft Dice
* ``l3 = mean|(1 - a m_hat) x_hat + a m_hat s_hat - x|``  recomposition

``total = w0 l0 + w1 l1 + w2 l2 + w3 l3``. Real-tumor data (no ground truth
layers) uses weights ``(0, 0, 0, w3)`` with ``alpha = 1``.

Everything is evaluated in float64. When the target ``x`` is stored as float32
the recomposition is rounded to float32 before the residual is taken, so the
ground-truth decomposition of a stored sample scores exactly zero; gradients
treat that rounding as the identity.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._accel import njit, use_numba
from .errors import ShapeMismatchError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    l0: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 1.0
    alpha: float | None = None  # None: use the target's stored alpha

    def __post_init__(self):
        for name in ("l0", "l1", "l2", "l3"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"weight {name} must be >= 0")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def as_tuple(self):
        return (self.l0, self.l1, self.l2, self.l3)

    @classmethod
    def parse(cls, text, alpha=None):
        parts = [float(p) for p in str(text).split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(*parts, alpha=alpha)


DEFAULT_WEIGHTS = LossWeights()
REAL_DATA_WEIGHTS = LossWeights(0.0, 0.0, 0.0, 1.0, alpha=1.0)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Predicted normal organ, tumor and soft mask (``m_hat`` in [0, 1])."""

    x_hat: np.ndarray
    s_hat: np.ndarray
    m_hat: np.ndarray

    def __post_init__(self):
        arrs = []
        for name in ("x_hat", "s_hat", "m_hat"):
            a = np.asarray(getattr(self, name))
            if a.dtype not in (np.float32, np.float64):
                a = a.astype(np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            arrs.append(a)
        if len({a.shape for a in arrs}) != 1:
            raise ShapeMismatchError(f"decomposition fields differ in shape: {[a.shape for a in arrs]}")
        if arrs[2].min() < 0 or arrs[2].max() > 1:
            raise ValueError("m_hat must lie in [0, 1]")
        for name, a in zip(("x_hat", "s_hat", "m_hat"), arrs):
            object.__setattr__(self, name, a)

    @property
    def shape(self):
        return self.x_hat.shape

    @classmethod
    def from_sample(cls, sample):
        """The ground-truth decomposition of a synthetic sample."""
        return cls(sample.x_n.data, sample.s.data, sample.m.data.astype(np.float64))


@dataclass(frozen=True, eq=False)
class LossTarget:
    """What the losses compare against; real-data targets carry only ``x``."""

    x: np.ndarray | None = None
    x_n: np.ndarray | None = None
    s: np.ndarray | None = None
    m: np.ndarray | None = None
    alpha: float | None = None

    @classmethod
    def from_sample(cls, sample):
        return cls(sample.x.data, sample.x_n.data, sample.s.data, sample.m.data, sample.alpha)

    @classmethod
    def real(cls, x):
        return cls(x=getattr(x, "data", x))

    def as_float64(self):
        conv = lambda a: None if a is None else np.asarray(a, dtype=np.float64)
        return LossTarget(conv(self.x), conv(self.x_n), conv(self.s), conv(self.m), self.alpha)


@dataclass
class LossReport:
    l0: float | None
    l1: float | None
    l2: float | None
    l3: float | None
    total: float
    weights: LossWeights
    alpha: float | None
    gradients: dict | None = field(default=None, repr=False)

    def to_dict(self):
        w = asdict(self.weights)
        return {"l0": self.l0, "l1": self.l1, "l2": self.l2, "l3": self.l3, "total": self.total,
                "lambda0": w["l0"], "lambda1": w["l1"], "lambda2": w["l2"], "lambda3": w["l3"],
                "alpha": self.alpha}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit
def _sums_numba(xh, sh, mh, x, xn, s, m, alpha, round32):
    a0 = 0.0
    a1 = 0.0
    a3 = 0.0
    inter = 0.0
    shat = 0.0
    sm = 0.0
    for v in range(xh.size):
        a0 += abs(xh[v] - xn[v])
        a1 += abs(sh[v] - s[v])
        am = alpha * mh[v]
        rec = (1.0 - am) * xh[v] + am * sh[v]
        if round32:
            rec = np.float64(np.float32(rec))
        a3 += abs(rec - x[v])
        inter += mh[v] * m[v]
        shat += mh[v]
        sm += m[v]
    return a0, a1, a3, inter, shat, sm


@njit
def _grads_numba(xh, sh, mh, x, xn, s, m, alpha, round32, w0, w1, w2, w3, inter, shat, sm, gx, gs, gm):
    n = xh.size
    num = 2.0 * inter + 1e-6
    den = shat + sm + 1e-6
    for v in range(n):
        am = alpha * mh[v]
        rec = (1.0 - am) * xh[v] + am * sh[v]
        if round32:
            rec = np.float64(np.float32(rec))
        sr = np.sign(rec - x[v]) * w3 / n
        gx[v] = w0 * np.sign(xh[v] - xn[v]) / n + sr * (1.0 - am)
        gs[v] = w1 * np.sign(sh[v] - s[v]) / n + sr * am
        gm[v] = w2 * (num - 2.0 * m[v] * den) / (den * den) + sr * alpha * (sh[v] - xh[v])


def _recompose(xh, sh, mh, alpha, round32):
    am = alpha * mh
    rec = (1.0 - am) * xh + am * sh
    if round32:
        rec = rec.astype(np.float32).astype(np.float64)
    return rec


def _sums_numpy(xh, sh, mh, x, xn, s, m, alpha, round32):
    rec = _recompose(xh, sh, mh, alpha, round32)
    return (np.abs(xh - xn).sum(), np.abs(sh - s).sum(), np.abs(rec - x).sum(),
            (mh * m).sum(), mh.sum(), m.sum())


def _grads_numpy(xh, sh, mh, x, xn, s, m, alpha, round32, w0, w1, w2, w3, inter, shat, sm, gx, gs, gm):
    n = xh.size
    rec = _recompose(xh, sh, mh, alpha, round32)
    sr = np.sign(rec - x) * w3 / n
    am = alpha * mh
    num = 2.0 * inter + DICE_EPS
    den = shat + sm + DICE_EPS
    gx[:] = w0 * np.sign(xh - xn) / n + sr * (1.0 - am)
    gs[:] = w1 * np.sign(sh - s) / n + sr * am
    gm[:] = w2 * (num - 2.0 * m * den) / (den * den) + sr * alpha * (sh - xh)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _prepare(d, target, w):
    shape = d.shape
    for name in ("x", "x_n", "s", "m"):
        a = getattr(target, name)
        if a is not None and np.shape(a) != shape:
            raise ShapeMismatchError(f"target field {name} has shape {np.shape(a)}, expected {shape}")
    needs = {"x_n": w.l0 > 0, "s": w.l1 > 0, "m": w.l2 > 0, "x": w.l3 > 0}
    for name, needed in needs.items():
        if needed and getattr(target, name) is None:
            raise ValueError(f"loss weights require target field {name!r}, which the target does not carry")
    alpha = w.alpha if w.alpha is not None else target.alpha
    if alpha is None:
        if w.l3 > 0:
            raise ValueError("recomposition loss needs alpha (from the weights or the target)")
        alpha = 1.0
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")

    flat = lambda a: np.ascontiguousarray(a, dtype=np.float64).ravel()
    zeros = np.zeros(int(np.prod(shape)))
    fields = [flat(d.x_hat), flat(d.s_hat), flat(d.m_hat)]
    present = {}
    for name in ("x", "x_n", "s", "m"):
        a = getattr(target, name)
        present[name] = a is not None
        fields.append(zeros if a is None else flat(a))
    round32 = target.x is not None and np.asarray(target.x).dtype == np.float32
    return fields, float(alpha), bool(round32), present


def total_loss(d, target, w=DEFAULT_WEIGHTS, gradients=False):
    """All four terms, the weighted total and (optionally) gradients w.r.t. the three fields."""
    if not isinstance(target, LossTarget):
        target = LossTarget.from_sample(target)
    fields, alpha, round32, present = _prepare(d, target, w)
    n = fields[0].size
    sums = (_sums_numba if use_numba() else _sums_numpy)(*fields, alpha, round32)
    a0, a1, a3, inter, shat, sm = (float(v) for v in sums)
    l0 = a0 / n if present["x_n"] else None
    l1 = a1 / n if present["s"] else None
    l2 = 1.0 - (2.0 * inter + DICE_EPS) / (shat + sm + DICE_EPS) if present["m"] else None
    l3 = a3 / n if present["x"] else None
    total = sum(wk * lk for wk, lk in zip(w.as_tuple, (l0, l1, l2, l3)) if lk is not None)
    grads = None
    if gradients:
        gx, gs, gm = (np.empty(n) for _ in range(3))
        kernel = _grads_numba if use_numba() else _grads_numpy
        kernel(*fields, alpha, round32, float(w.l0), float(w.l1), float(w.l2), float(w.l3),
               inter, shat, sm, gx, gs, gm)
        shape = d.shape
        grads = {"x_hat": gx.reshape(shape), "s_hat": gs.reshape(shape), "m_hat": gm.reshape(shape)}
    return LossReport(l0, l1, l2, l3, float(total), w, alpha, grads)


def loss_gradients(d, target, w=DEFAULT_WEIGHTS):
    """``(d total/d x_hat, d total/d s_hat, d total/d m_hat)`` as dense arrays."""
    g = total_loss(d, target, w, gradients=True).gradients
    return g["x_hat"], g["s_hat"], g["m_hat"]


def loss_l0(d, target):
    return total_loss(d, target, LossWeights(1.0, 0.0, 0.0, 0.0)).l0


def loss_l1(d, target):
    return total_loss(d, target, LossWeights(0.0, 1.0, 0.0, 0.0)).l1


def soft_dice_loss(m_hat, m):
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if m_hat.shape != m.shape:
        raise ShapeMismatchError(f"mask shapes differ: {m_hat.shape} vs {m.shape}")
    inter = float((m_hat * m).sum())
    return 1.0 - (2.0 * inter + DICE_EPS) / (float(m_hat.sum()) + float(m.sum()) + DICE_EPS)


def soft_dice_gradient(m_hat, m):
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    num = 2.0 * float((m_hat * m).sum()) + DICE_EPS
    den = float(m_hat.sum()) + float(m.sum()) + DICE_EPS
    return (num - 2.0 * m * den) / (den * den)


def recomposition_loss(d, target, alpha=None):
    w = LossWeights(0.0, 0.0, 0.0, 1.0, alpha=alpha)
    return total_loss(d, target, w).l3
