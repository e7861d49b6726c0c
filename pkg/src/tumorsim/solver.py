"""Per-volume decomposition by gradient descent on the layer losses.

There is no learned model here: each volume gets its own optimisation of
``(x_hat, s_hat, z)`` with ``m_hat = logistic(z)``. Every field is updated in
turn (fresh gradient each time) with a backtracking line search.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from ._accel import use_numba
from .losses import (
    DEFAULT_WEIGHTS, REAL_DATA_WEIGHTS, Decomposition, LossTarget, LossWeights,
    _grads_numba, _grads_numpy, _sums_numba, _sums_numpy, DICE_EPS,
)

FIELDS = ("x_hat", "s_hat", "z")
_MIN_STEP = 1e-300


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes are in voxel-normalised units: the update is ``-lr * N * grad``."""

    lr_x: float = 1.0
    lr_s: float = 1.0
    lr_z: float = 1.0
    max_iterations: int = 5000
    tolerance: float = 2e-4
    init: str = "zero"          # "zero" (m_hat = 0.5) or "normal"
    init_scale: float = 1.0     # std of z for init="normal"
    seed: int = 0
    weights: LossWeights = DEFAULT_WEIGHTS
    max_halvings: int = 20
    step_growth: float = 2.0
    max_step: float = 1e4
    sufficient_decrease: float = 1e-4
    eval_every: int = 1

    def __post_init__(self):
        for name in ("lr_x", "lr_s", "lr_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")
        if self.init not in ("zero", "normal"):
            raise ValueError(f"unknown init law {self.init!r}")
        if int(self.eval_every) < 1:
            raise ValueError("eval_every must be >= 1")

    def lr(self, name):
        return {"x_hat": self.lr_x, "s_hat": self.lr_s, "z": self.lr_z}[name]


@dataclass(frozen=True, eq=False)
class SolverState:
    iteration: int
    x_hat: np.ndarray
    s_hat: np.ndarray
    z: np.ndarray
    steps: dict
    history: tuple = ()

    @property
    def m_hat(self):
        return expit(self.z)

    def decomposition(self):
        return Decomposition(self.x_hat, self.s_hat, self.m_hat)


class _Objective:
    """Loss/gradient evaluation against fixed float64 targets, no revalidation."""

    def __init__(self, target, weights):
        self.shape = np.shape(target.x)
        self.n = int(np.prod(self.shape))
        zeros = np.zeros(self.n)
        flat = lambda a: zeros if a is None else np.ascontiguousarray(a, dtype=np.float64).ravel()
        self.present = {k: getattr(target, k) is not None for k in ("x", "x_n", "s", "m")}
        self.t = [flat(target.x), flat(target.x_n), flat(target.s), flat(target.m)]
        alpha = weights.alpha if weights.alpha is not None else target.alpha
        if alpha is None:
            raise ValueError("solver needs alpha from the weights or the target")
        self.alpha = float(alpha)
        self.w = tuple(float(v) for v in weights.as_tuple)
        for name, wk in zip(("x_n", "s", "m", "x"), self.w):
            if wk > 0 and not self.present[name]:
                raise ValueError(f"weights require target field {name!r}")
        self.numba = use_numba()

    def terms(self, xh, sh, mh):
        fn = _sums_numba if self.numba else _sums_numpy
        a0, a1, a3, inter, shat, sm = fn(xh.ravel(), sh.ravel(), mh.ravel(), *self.t, self.alpha, False)
        n = self.n
        l0 = a0 / n if self.present["x_n"] else None
        l1 = a1 / n if self.present["s"] else None
        l2 = 1.0 - (2.0 * inter + DICE_EPS) / (shat + sm + DICE_EPS) if self.present["m"] else None
        l3 = a3 / n if self.present["x"] else None
        total = sum(wk * lk for wk, lk in zip(self.w, (l0, l1, l2, l3)) if lk is not None)
        return (l0, l1, l2, l3), float(total), (inter, shat, sm)

    def value(self, xh, sh, mh):
        return self.terms(xh, sh, mh)[1]

    def gradients(self, xh, sh, mh):
        _, _, (inter, shat, sm) = self.terms(xh, sh, mh)
        gx, gs, gm = (np.empty(self.n) for _ in range(3))
        fn = _grads_numba if self.numba else _grads_numpy
        fn(xh.ravel(), sh.ravel(), mh.ravel(), *self.t, self.alpha, False, *self.w,
           inter, shat, sm, gx, gs, gm)
        return gx.reshape(self.shape), gs.reshape(self.shape), gm.reshape(self.shape)


def _target_for(sample, weights):
    if isinstance(sample, LossTarget):
        return sample.as_float64()
    if hasattr(sample, "x_n"):
        return LossTarget.from_sample(sample).as_float64()
    return LossTarget.real(sample).as_float64()


def _history_entry(it, terms, total, flags):
    l0, l1, l2, l3 = terms
    return {"iteration": it, "l0": l0, "l1": l1, "l2": l2, "l3": l3, "total": total, "skipped": flags}


def init(sample, cfg=SolverConfig(), rng=None):
    """Start from ``x_hat = s_hat = x``; ``z = 0`` (or Gaussian for ``init="normal"``)."""
    x = np.asarray(getattr(sample, "x", sample), dtype=np.float64)
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if cfg.init == "zero":
        z = np.zeros(x.shape)
    else:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        z = cfg.init_scale * rng.standard_normal(x.shape)
    steps = {name: float(cfg.lr(name)) for name in FIELDS}
    return SolverState(0, x.copy(), x.copy(), z, steps)


def _l1_terms(obj, name, xh, sh, mh):
    """``(smooth_part, [(residual, coefficient), ...])`` of the gradient w.r.t. one field.

    The gradient is ``smooth + sum(sign(r) * coef)`` voxelwise.
    """
    x, xn, s, m = (t.reshape(xh.shape) for t in obj.t)
    w0, w1, w2, w3 = obj.w
    a, n = obj.alpha, obj.n
    r3 = (1.0 - a * mh) * xh + a * mh * sh - x
    if name == "x_hat":
        terms = [(xh - xn, w0 / n), (r3, w3 * (1.0 - a * mh) / n)]
        return 0.0, terms
    if name == "s_hat":
        return 0.0, [(sh - s, w1 / n), (r3, w3 * a * mh / n)]
    dm = mh * (1.0 - mh)
    smooth = 0.0
    if w2 > 0:
        _, _, (inter, shat, sm) = obj.terms(xh, sh, mh)
        num = 2.0 * inter + DICE_EPS
        den = shat + sm + DICE_EPS
        smooth = w2 * (num - 2.0 * m * den) / (den * den) * dm
    return smooth, [(r3, w3 * a * (sh - xh) * dm / n)]


def descent_direction(obj, name, xh, sh, mh, delta=0.0):
    """Minimum-norm element of the ``delta``-enlarged subdifferential w.r.t. one field.

    An L1 term whose residual satisfies ``|r| <= delta`` is treated as sitting
    on its kink: it may absorb up to its full slope, which soft-thresholds the
    rest of the gradient. ``delta = 0`` gives the exact steepest-descent
    direction; a positive ``delta`` keeps nearly converged voxels from pinning
    the shared step size of voxels that are still far off.
    """
    smooth, terms = _l1_terms(obj, name, xh, sh, mh)
    g = np.zeros(xh.shape) + smooth
    slack = np.zeros(xh.shape)
    for r, coef in terms:
        near = np.abs(r) <= delta
        g = g + np.where(near, 0.0, np.sign(r) * coef)
        slack = slack + np.where(near, np.abs(coef), 0.0)
    return np.sign(g) * np.maximum(np.abs(g) - slack, 0.0)


def _reach(obj, name):
    """Bound on ``|residual change| / t`` for a unit step along a voxel-normalised direction."""
    w0, w1, _, w3 = obj.w
    return {"x_hat": w0 + w3, "s_hat": w1 + w3, "z": 0.0}[name]


def _line_search(obj, state, name, f0, cfg):
    xh, sh, z = state.x_hat, state.s_hat, state.z
    mh = expit(z)
    t = min(state.steps[name] * cfg.step_growth, cfg.max_step)
    reach = _reach(obj, name)
    while True:
        g = descent_direction(obj, name, xh, sh, mh, delta=t * reach)
        if np.any(g != 0.0) or reach == 0.0 or t < _MIN_STEP:
            break
        t *= 0.5  # every voxel is within reach of its kink: refine the neighbourhood
    direction = obj.n * g
    slope = float(np.vdot(g, direction))
    if slope == 0.0:
        return None, f0, max(t, _MIN_STEP), False
    for _ in range(cfg.max_halvings + 1):
        trial = {"x_hat": xh, "s_hat": sh, "z": z}[name] - t * direction
        if name == "x_hat":
            f = obj.value(trial, sh, mh)
        elif name == "s_hat":
            f = obj.value(xh, trial, mh)
        else:
            f = obj.value(xh, sh, expit(trial))
        if f <= f0 - cfg.sufficient_decrease * t * slope:
            return trial, f, t, False
        t *= 0.5
    return None, f0, t, True


def step(state, sample, weights=None, cfg=SolverConfig(), _obj=None):
    """One sweep over ``x_hat``, ``s_hat`` and ``z``, each with its own line search.

    A field whose search exhausts ``max_halvings`` is left unchanged and listed
    under ``skipped`` in the history entry.
    """
    weights = cfg.weights if weights is None else weights
    obj = _obj or _Objective(_target_for(sample, weights), weights)
    f0 = obj.value(state.x_hat, state.s_hat, expit(state.z))
    fields = {"x_hat": state.x_hat, "s_hat": state.s_hat, "z": state.z}
    steps = dict(state.steps)
    skipped = []
    cur = state
    for name in FIELDS:
        new, f1, t, failed = _line_search(obj, cur, name, f0, cfg)
        steps[name] = t
        if failed:
            skipped.append(name)
        if new is not None:
            fields[name] = new
            f0 = f1
        cur = replace(cur, steps=steps, **fields)
    terms, total, _ = obj.terms(cur.x_hat, cur.s_hat, expit(cur.z))
    it = state.iteration + 1
    history = state.history
    if it % cfg.eval_every == 0 or skipped:
        history = history + (_history_entry(it, terms, total, skipped),)
    return replace(cur, iteration=it, history=history)


def solve(sample, cfg=SolverConfig(), mode=None, rng=None):
    """Iterate until ``total <= tolerance`` or ``max_iterations``; returns ``(Decomposition, history)``.

    ``sample`` is a SyntheticSample (supervised, all four losses) or a bare
    Volume/array (real-data mode: L3 only at alpha = 1). ``mode`` may force
    ``"supervised"`` or ``"real"``.
    """
    if mode is None:
        mode = "supervised" if hasattr(sample, "x_n") else "real"
    if mode == "real":
        x = getattr(sample, "x", sample)
        target = LossTarget.real(x).as_float64()
        weights = REAL_DATA_WEIGHTS
    elif mode == "supervised":
        target = _target_for(sample, cfg.weights)
        weights = cfg.weights
    else:
        raise ValueError(f"unknown mode {mode!r}")
    obj = _Objective(target, weights)
    state = init(target.x, cfg, rng)
    terms, total, _ = obj.terms(state.x_hat, state.s_hat, expit(state.z))
    state = replace(state, history=(_history_entry(0, terms, total, []),))
    history = list(state.history)
    state = replace(state, history=())
    while state.iteration < cfg.max_iterations and total > cfg.tolerance:
        state = step(state, target, weights, cfg, _obj=obj)
        if state.history:
            history.extend(state.history)
            total = state.history[-1]["total"]
            state = replace(state, history=())
        else:
            total = obj.value(state.x_hat, state.s_hat, expit(state.z))
    if history[-1]["iteration"] != state.iteration:
        terms, total, _ = obj.terms(state.x_hat, state.s_hat, expit(state.z))
        history.append(_history_entry(state.iteration, terms, total, []))
    return state.decomposition(), history


def threshold(m_hat, level=0.5):
    return np.asarray(m_hat) >= level


def gradient_check(sample, point, h=1e-5, weights=DEFAULT_WEIGHTS, n_coords=32, rng=None,
                   kink_screen=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    Checks a random subset of ``n_coords`` coordinates per field, skipping
    coordinates whose L1 residuals are within ``kink_screen`` of a kink.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    target = _target_for(sample, weights)
    obj = _Objective(target, weights)
    xh = np.array(point.x_hat, dtype=np.float64)
    sh = np.array(point.s_hat, dtype=np.float64)
    mh = np.array(point.m_hat, dtype=np.float64)
    grads = obj.gradients(xh, sh, mh)

    alpha = obj.alpha
    rec = (1.0 - alpha * mh) * xh + alpha * mh * sh
    x, xn, s, _ = (t.reshape(xh.shape) for t in obj.t)
    w0, w1, _, w3 = obj.w
    kinks = {
        "x_hat": ((np.abs(xh - xn) <= kink_screen) & (w0 > 0)) | ((np.abs(rec - x) <= kink_screen) & (w3 > 0)),
        "s_hat": ((np.abs(sh - s) <= kink_screen) & (w1 > 0)) | ((np.abs(rec - x) <= kink_screen) & (w3 > 0)),
        "m_hat": (np.abs(rec - x) <= kink_screen) & (w3 > 0),
    }
    worst = 0.0
    arrays = {"x_hat": xh, "s_hat": sh, "m_hat": mh}
    for k, name in enumerate(("x_hat", "s_hat", "m_hat")):
        arr = arrays[name]
        ok = np.flatnonzero(~kinks[name].ravel())
        if ok.size == 0:
            continue
        pick = rng.choice(ok, size=min(n_coords, ok.size), replace=False)
        for idx in pick:
            flat = arr.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            fp = obj.value(xh, sh, mh)
            flat[idx] = orig - h
            fm = obj.value(xh, sh, mh)
            flat[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            an = grads[k].reshape(-1)[idx]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def history_to_jsonl(history):
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)
