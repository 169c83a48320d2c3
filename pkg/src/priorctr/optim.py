"""SGD and lazy sparse Adam, plus the group-routing step.

The prior-logit vector C is the only SGD-group slot; everything else is
updated by Adam.  Sparse slots carry (row indices, row gradients) pairs and
Adam keeps per-row step counters so bias correction is exact under lazy
(touched-rows-only) updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn_core import ADAM_GROUP, SGD_GROUP, ParamSlot, UntaggedSlot


class NonFiniteGrad(ValueError):
    pass


@dataclass
class SgdState:
    lr: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # per-slot-id moment buffers and step counters
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def ensure(self, slot: ParamSlot):
        if slot.id not in self.m:
            self.m[slot.id] = np.zeros_like(slot.values)
            self.v[slot.id] = np.zeros_like(slot.values)
            if slot.sparse:
                self.steps[slot.id] = np.zeros(slot.values.shape[0], dtype=np.int64)
            else:
                self.steps[slot.id] = 0


def sgd_step(slot: ParamSlot, state: SgdState):
    if slot.sparse:
        if slot.sparse_grad is None:
            return
        idx, rows = slot.sparse_grad
        if not np.all(np.isfinite(rows)):
            raise NonFiniteGrad(slot.id)
        slot.values[idx] -= state.lr * rows
    else:
        if not np.all(np.isfinite(slot.grad)):
            raise NonFiniteGrad(slot.id)
        slot.values -= state.lr * slot.grad


def adam_step(slot: ParamSlot, state: AdamState):
    state.ensure(slot)
    b1, b2 = state.beta1, state.beta2
    if slot.sparse:
        if slot.sparse_grad is None:
            return
        idx, rows = slot.sparse_grad
        if not np.all(np.isfinite(rows)):
            raise NonFiniteGrad(slot.id)
        g = rows
        if state.weight_decay:
            g = g + state.weight_decay * slot.values[idx]
        state.steps[slot.id][idx] += 1
        t = state.steps[slot.id][idx].astype(np.float64)
        m = state.m[slot.id]
        v = state.v[slot.id]
        m[idx] = b1 * m[idx] + (1.0 - b1) * g
        v[idx] = b2 * v[idx] + (1.0 - b2) * g * g
        shape = (-1,) + (1,) * (slot.values.ndim - 1)
        mhat = m[idx] / (1.0 - b1 ** t).reshape(shape)
        vhat = v[idx] / (1.0 - b2 ** t).reshape(shape)
        slot.values[idx] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    else:
        if not np.all(np.isfinite(slot.grad)):
            raise NonFiniteGrad(slot.id)
        g = slot.grad
        if state.weight_decay:
            g = g + state.weight_decay * slot.values
        state.steps[slot.id] += 1
        t = state.steps[slot.id]
        m = state.m[slot.id]
        v = state.v[slot.id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        slot.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def route_and_step(slots, sgd: SgdState, adam: AdamState,
                   sgd_rule=sgd_step, adam_rule=adam_step):
    """Apply the per-group update to every slot within one mini-batch iteration.

    ``sgd_rule``/``adam_rule`` are swappable so experiments can, e.g., train
    the prior logits with Adam instead of SGD.
    """
    for slot in slots:
        if slot.update_rule == SGD_GROUP:
            sgd_rule(slot, sgd)
        elif slot.update_rule == ADAM_GROUP:
            adam_rule(slot, adam)
        else:
            raise UntaggedSlot(slot.id)
