"""Minimal reverse-mode gradient tape over numpy arrays.

Only the handful of ops the sparse encoder and the pruning layers need.
``Var`` wraps an ndarray; gradients accumulate additively, so fan-out works
without extra bookkeeping. Ops accept ``tape=None`` to run forward-only
(inference), skipping all recording.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class Var:
    """An array with an optional gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var({self.name or 'anon'}, shape={self.value.shape})"


def accum(var: Var, g: np.ndarray) -> None:
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


class TapeRecord:
    __slots__ = ("name", "backward", "meta")

    def __init__(self, name: str, backward: Callable[[], None], meta: dict):
        self.name = name
        self.backward = backward
        self.meta = meta


class Tape:
    """Ordered record of forward ops; replayed in reverse for gradients."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, name: str, backward: Callable[[], None], **meta) -> TapeRecord:
        rec = TapeRecord(name, backward, meta)
        self.records.append(rec)
        return rec

    def backward(self, root: Var, seed=None) -> None:
        if not self.records:
            raise RuntimeError("backward called before any forward op was recorded")
        if seed is None:
            seed = np.ones_like(root.value)
        accum(root, np.asarray(seed, dtype=root.value.dtype))
        for rec in reversed(self.records):
            rec.backward()


# ---------------------------------------------------------------------------
# ops


def relu(tape: Optional[Tape], x: Var) -> Var:
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0))
    if tape is not None:
        def bwd():
            if out.grad is not None:
                accum(x, out.grad * mask)
        tape.record("relu", bwd)
    return out


def linear(tape: Optional[Tape], x: Var, w: Var, b: Var) -> Var:
    """x (N, C) @ w (C, M) + b (M)."""
    out = Var(x.value @ w.value + b.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            accum(x, g @ w.value.T)
            accum(w, x.value.T @ g)
            accum(b, g.sum(axis=0))
        tape.record("linear", bwd)
    return out


def gather_rows(tape: Optional[Tape], x: Var, idx: np.ndarray) -> Var:
    out = Var(x.value[idx])
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            np.add.at(x.grad, idx, out.grad)
        tape.record("gather_rows", bwd)
    return out


def concat_rows(tape: Optional[Tape], a: Var, b: Var) -> Var:
    na = a.value.shape[0]
    out = Var(np.concatenate([a.value, b.value], axis=0))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(a, out.grad[:na])
            accum(b, out.grad[na:])
        tape.record("concat_rows", bwd)
    return out


def row_scale(tape: Optional[Tape], x: Var, s: Var) -> Var:
    """Scale row i of x (N, C) by scalar s_i (N,)."""
    out = Var(x.value * s.value[:, None])
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(x, out.grad * s.value[:, None])
            accum(s, (out.grad * x.value).sum(axis=1))
        tape.record("row_scale", bwd)
    return out


def keep_prob(tape: Optional[Tape], logits: Var) -> Var:
    """Two-way softmax keep probability p = e^{l1} / (e^{l0} + e^{l1})."""
    d = logits.value[:, 1] - logits.value[:, 0]
    p = 1.0 / (1.0 + np.exp(-d))
    out = Var(p)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad * p * (1.0 - p)
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.value)
            logits.grad[:, 1] += g
            logits.grad[:, 0] -= g
        tape.record("keep_prob", bwd)
    return out


def gumbel_keep(tape: Optional[Tape], logits: Var, g0: np.ndarray,
                g1: np.ndarray) -> tuple[Var, np.ndarray]:
    """Hard keep decision from Gumbel-perturbed logits.

    Forward value of z is the binary indicator 1(l1 + g1 > l0 + g0); the
    gradient passes straight through to the soft relaxation
    p_hat = softmax(l + g)[1], so dL/dz arrives at the logits as if z were
    p_hat. Returns (z, p_hat values).
    """
    y0 = logits.value[:, 0] + g0
    y1 = logits.value[:, 1] + g1
    d = y1 - y0
    phat = np.empty_like(d)
    pos = d >= 0
    phat[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    phat[~pos] = e / (1.0 + e)
    z = Var((y1 > y0).astype(logits.value.dtype))
    if tape is not None:
        rec_holder = {}

        def bwd():
            if z.grad is None:
                return
            # straight-through: gradient at p_hat equals gradient at z
            rec_holder["rec"].meta["grad_at_phat"] = z.grad.copy()
            g = z.grad * phat * (1.0 - phat)
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.value)
            logits.grad[:, 1] += g
            logits.grad[:, 0] -= g

        rec = tape.record("gumbel_keep", bwd, straight_through=True, phat=phat)
        rec_holder["rec"] = rec
    return z, phat


def mean_all(tape: Optional[Tape], x: Var) -> Var:
    n = x.value.size
    out = Var(np.asarray(x.value.mean()))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(x, np.full_like(x.value, out.grad / n))
        tape.record("mean_all", bwd)
    return out


def squared_gap(tape: Optional[Tape], m: Var, target: float) -> Var:
    gap = target - float(m.value)
    out = Var(np.asarray(gap * gap, dtype=m.value.dtype))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(m, np.asarray(-2.0 * gap * out.grad, dtype=m.value.dtype))
        tape.record("squared_gap", bwd)
    return out


def add(tape: Optional[Tape], a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(a, out.grad)
            accum(b, out.grad)
        tape.record("add", bwd)
    return out


def scale(tape: Optional[Tape], a: Var, c: float) -> Var:
    out = Var(a.value * c)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            accum(a, out.grad * c)
        tape.record("scale", bwd)
    return out


def softmax_xent(tape: Optional[Tape], logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy over rows; labels are integer class ids."""
    n = logits.value.shape[0]
    if n == 0:
        raise ValueError("cross-entropy over zero cells")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    out = Var(np.asarray(nll.mean()))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            accum(logits, g * (out.grad / n))
        tape.record("softmax_xent", bwd)
    return out


def compose_rows(tape: Optional[Tape], occ_idx: np.ndarray, occ: Var,
                 default: Var, n_rows: int) -> Var:
    """Build an (n_rows, C) array: rows at occ_idx come from occ, the rest
    share the learned default vector."""
    c = occ.value.shape[1] if occ.value.ndim == 2 else default.value.shape[0]
    val = np.tile(default.value, (n_rows, 1))
    empty_mask = np.ones(n_rows, dtype=bool)
    if len(occ_idx):
        val[occ_idx] = occ.value
        empty_mask[occ_idx] = False
    out = Var(val)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if len(occ_idx):
                accum(occ, out.grad[occ_idx])
            accum(default, out.grad[empty_mask].sum(axis=0))
        tape.record("compose_rows", bwd)
    return out


def column_max(tape: Optional[Tape], x: Var, col: np.ndarray,
               ) -> tuple[np.ndarray, Var]:
    """Channel-wise max over rows sharing a column id.

    Returns (unique column ids sorted ascending, Var of shape (U, C)).
    """
    n, c = x.value.shape
    if n == 0:
        return np.empty(0, dtype=np.int64), Var(np.empty((0, c), dtype=x.value.dtype))
    order = np.argsort(col, kind="stable")
    sc = col[order]
    starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
    uniq = sc[starts]
    bounds = np.r_[starts, n]
    out_val = np.empty((len(uniq), c), dtype=x.value.dtype)
    arg = np.empty((len(uniq), c), dtype=np.int64)
    for i in range(len(uniq)):
        seg = order[bounds[i]:bounds[i + 1]]
        block = x.value[seg]
        am = block.argmax(axis=0)
        arg[i] = seg[am]
        out_val[i] = block[am, np.arange(c)]
    out = Var(out_val)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            np.add.at(x.grad, (arg.ravel(), np.tile(np.arange(c), len(uniq))),
                      out.grad.ravel())
        tape.record("column_max", bwd)
    return uniq, out


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Plain SGD with momentum over a list of parameter Vars."""

    def __init__(self, params: list[Var], lr: float, momentum: float = 0.9,
                 lr_scales: Optional[list[float]] = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in params]
        self.lr_scales = lr_scales if lr_scales is not None else [1.0] * len(params)

    def step(self) -> None:
        for p, v, s in zip(self.params, self.velocity, self.lr_scales):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * s * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
