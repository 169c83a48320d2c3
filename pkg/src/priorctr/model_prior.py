"""Teacher snapshots and the likelihood / output-anchoring losses.

Each incremental period freezes a deep copy of the previous period's model.
The training objective for the main parameters is then
mean BCE on the new data plus (lambda/2) times the mean squared distance
between student and teacher output probabilities.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .nn_core import bce


class EmptyBatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NegativeLambda(ValueError):
    pass


class NonFiniteState(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_likelihood: float
    l_prior: float
    lam: float
    total: float


class TeacherSnapshot:
    """Immutable frozen copy of a full model (prior layer included)."""

    def __init__(self, model, period: int):
        self.model = model
        self.period = period

    def predict(self, batch) -> np.ndarray:
        probs, _ = self.model.forward(batch, training=False)
        return probs


def snapshot_teacher(model, period: int = -1) -> TeacherSnapshot:
    for slot in model.param_slots():
        if not np.all(np.isfinite(slot.values)):
            raise NonFiniteState(slot.id)
    frozen = copy.deepcopy(model)
    for slot in frozen.param_slots():
        slot.zero_grad()
    return TeacherSnapshot(frozen, period)


def likelihood_loss(p_student: np.ndarray, labels: np.ndarray) -> float:
    if len(p_student) == 0:
        raise EmptyBatch()
    return float(np.mean(bce(p_student, labels)))


def prior_loss(p_student: np.ndarray, p_teacher: np.ndarray) -> float:
    if len(p_student) != len(p_teacher):
        raise LengthMismatch(f"{len(p_student)} vs {len(p_teacher)}")
    return float(np.mean((np.asarray(p_student) - np.asarray(p_teacher)) ** 2))


def total_loss(l_likelihood: float, l_prior: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise NegativeLambda(str(lam))
    return LossBreakdown(l_likelihood, l_prior, lam,
                         l_likelihood + 0.5 * lam * l_prior)
