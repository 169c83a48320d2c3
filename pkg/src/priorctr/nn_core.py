"""Shared numeric primitives: stable sigmoid/BCE, parameter slots, gradient checking.

Everything here operates on float64 numpy arrays. Gradients are produced by
hand-derived backward passes elsewhere; this module supplies the activation /
loss scalars they share and a central-difference checker used to validate them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Clamp applied inside every log term.
EPS = 1e-7

SGD_GROUP = "SGD_GROUP"
ADAM_GROUP = "ADAM_GROUP"


class NonFiniteLoss(ValueError):
    """A perturbed loss evaluation produced NaN/Inf."""


class UntaggedSlot(ValueError):
    """A parameter slot has no optimizer group tag."""


def sigmoid(z):
    """Numerically stable logistic function, elementwise on arrays or scalars."""
    z = np.asarray(z)
    if z.dtype != np.float32:
        z = z.astype(np.float64, copy=False)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def bce(p, y):
    """Clamped binary cross entropy, elementwise; p in [0,1], y in {0,1}."""
    p = np.asarray(p)
    if p.dtype != np.float32:
        p = p.astype(np.float64, copy=False)
    p = np.clip(p, EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=p.dtype)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class ParamSlot:
    """One named block of learnable parameters plus its gradient buffer.

    Dense slots accumulate into ``grad`` (same shape as ``values``).  Sparse
    slots accumulate a per-batch (row indices, row gradients) pair instead;
    untouched rows implicitly carry zero gradient.
    """

    id: str
    values: np.ndarray
    update_rule: str = ADAM_GROUP
    sparse: bool = False
    grad: np.ndarray | None = None
    # (unique row indices, gradient rows) for the current batch; sparse only
    sparse_grad: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.update_rule not in (SGD_GROUP, ADAM_GROUP):
            raise UntaggedSlot(f"slot {self.id!r} has unknown group {self.update_rule!r}")
        if not self.sparse and self.grad is None:
            self.grad = np.zeros_like(self.values)

    def zero_grad(self):
        if self.sparse:
            self.sparse_grad = None
        else:
            self.grad.fill(0.0)

    def add_sparse_grad(self, idx: np.ndarray, rows: np.ndarray):
        """Accumulate gradient rows for the given (possibly repeated) row indices."""
        if len(idx) == 0:
            return
        # stable sort + reduceat sums duplicates in original order, like add.at
        order = np.argsort(idx, kind="stable")
        sidx = np.asarray(idx)[order]
        starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
        uniq = sidx[starts]
        acc = np.add.reduceat(np.asarray(rows)[order], starts, axis=0)
        acc = acc.astype(self.values.dtype, copy=False)
        if self.sparse_grad is None:
            self.sparse_grad = (uniq, acc)
        else:
            pidx, prows = self.sparse_grad
            merged = np.union1d(pidx, uniq)
            out = np.zeros((merged.size,) + self.values.shape[1:], dtype=self.values.dtype)
            out[np.searchsorted(merged, pidx)] += prows
            out[np.searchsorted(merged, uniq)] += acc
            self.sparse_grad = (merged, out)

    def dense_grad(self) -> np.ndarray:
        """Materialize the gradient as a dense array (test/diagnostic use)."""
        if not self.sparse:
            return self.grad
        out = np.zeros_like(self.values)
        if self.sparse_grad is not None:
            idx, rows = self.sparse_grad
            out[idx] = rows
        return out


def grad_check(
    loss_fn: Callable[[], float],
    slots: Sequence[ParamSlot],
    compute_grads: Callable[[], None],
    eps: float = 1e-5,
    samples_per_slot: int = 40,
    min_total: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``compute_grads`` must populate every slot's gradient for the same fixed
    inputs that ``loss_fn`` evaluates.  Coordinates are sampled per slot (at
    least ``min_total`` overall, every slot covered) and the maximum relative
    error max(|a-n| / max(|a|,|n|,1e-8)) is returned.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for s in slots:
        s.zero_grad()
    compute_grads()
    analytic = {s.id: s.dense_grad().copy() for s in slots}

    per_slot = max(samples_per_slot, -(-min_total // max(len(slots), 1)))
    max_err = 0.0
    for s in slots:
        flat = s.values.reshape(-1)
        n = flat.size
        k = min(per_slot, n)
        coords = rng.choice(n, size=k, replace=False)
        a_flat = analytic[s.id].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp = loss_fn()
            flat[c] = orig - eps
            lm = loss_fn()
            flat[c] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteLoss(f"non-finite loss while perturbing {s.id}[{c}]")
            num = (lp - lm) / (2.0 * eps)
            a = a_flat[c]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            max_err = max(max_err, err)
    return max_err
