"""Finite-difference verification of the complete training gradient.

Checks every main-group slot against central differences of the combined
likelihood + anchoring loss, and the prior-logit vector C against its own
auxiliary loss (the main loss deliberately carries no gradient into C).
"""
from __future__ import annotations

import numpy as np

from .embedding import Schema, FieldSpec
from .interaction import InteractionConfig
from .model import CtrModel, ModelConfig
from .model_prior import likelihood_loss, prior_loss, snapshot_teacher
from .nn_core import grad_check
from .stream import SynthConfig, synth_drift


def _random_batch(schema: Schema, n: int, rng: np.random.Generator):
    from .embedding import Batch
    fi = []
    for j, f in enumerate(schema.fields):
        fi.append(schema.offsets[j] + rng.integers(0, f.vocab, size=n))
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    return Batch(fi, [None] * len(fi), labels, fi[0])


def check_model(kind: str = "DEEPFM", dim: int = 4, hidden=(8, 8),
                batch_size: int = 64, lam: float = 1.0, seed: int = 0,
                num_fields: int = 3, vocab: int = 20,
                corrupt_slot: str | None = None,
                eps: float = 1e-5) -> dict[str, float]:
    """Per-slot max relative error of analytic vs numeric gradients."""
    rng = np.random.default_rng(seed)
    schema = Schema([FieldSpec(f"f{j}", vocab) for j in range(num_fields)],
                    item_field="f0")
    mc = ModelConfig(dim=dim, num_bins=10, use_fp=True,
                     interaction=InteractionConfig(kind, tuple(hidden)))
    model = CtrModel(schema, mc, rng)
    # give the prior logits structure so bins are not all identical
    model.fp.c_slot.values[:, 0] = rng.normal(0.0, 0.8, size=schema.total_values)
    # inflate embeddings so pre-activations sit well away from the ReLU kinks,
    # otherwise the central difference itself crosses them
    model.embedding.slot.values[...] = rng.normal(0.0, 0.3,
                                                  size=model.embedding.slot.values.shape)
    model.fp.u_slot.values[...] = rng.normal(0.0, 0.3,
                                             size=model.fp.u_slot.values.shape)
    # zero-init biases put dead rows exactly on the ReLU kink, where central
    # differences straddle the corner; jitter them off it
    for slot in model.interaction.param_slots():
        if slot.id.startswith("b"):
            slot.values[...] = rng.normal(0.0, 0.1, size=slot.values.shape)
    # teacher with independently drawn weights so the anchoring term is active
    teacher_model = CtrModel(schema, mc, np.random.default_rng(seed + 1))
    teacher_model.fp.c_slot.values[...] = model.fp.c_slot.values
    teacher = snapshot_teacher(teacher_model)

    batch = _random_batch(schema, batch_size, rng)
    y = batch.labels
    n = batch.size

    def main_loss() -> float:
        probs, _ = model.forward(batch, training=False)
        p_t = teacher.predict(batch)
        return likelihood_loss(probs, y) + 0.5 * lam * prior_loss(probs, p_t)

    def main_grads():
        model.zero_grads()
        probs, cache = model.forward(batch, training=True)
        p_t = teacher.predict(batch)
        dlogit = (probs - y) / n + lam * (probs - p_t) * probs * (1 - probs) / n
        model.backward(cache, dlogit)
        if corrupt_slot is not None:
            for s in model.theta_slots():
                if s.id == corrupt_slot:
                    if s.sparse and s.sparse_grad is not None:
                        idx, rows = s.sparse_grad
                        s.sparse_grad = (idx, rows * 2.0)
                    elif not s.sparse:
                        s.grad *= 2.0

    check_rng = np.random.default_rng(seed + 2)
    errors: dict[str, float] = {}
    for slot in model.theta_slots():
        errors[slot.id] = grad_check(main_loss, [slot], main_grads, eps=eps,
                                     samples_per_slot=40, min_total=40,
                                     rng=check_rng)

    def fp_loss() -> float:
        shat = model.fp.forward(batch)
        from .nn_core import bce
        return float(np.mean(np.mean(bce(shat, y[:, None]), axis=1)))

    def fp_grads():
        model.zero_grads()
        shat = model.fp.forward(batch)
        model.fp.fp_loss_and_grad(batch, shat)
        if corrupt_slot == "C":
            idx, rows = model.fp.c_slot.sparse_grad
            model.fp.c_slot.sparse_grad = (idx, rows * 2.0)

    errors["C"] = grad_check(fp_loss, [model.fp.c_slot], fp_grads, eps=eps,
                             samples_per_slot=80, min_total=80, rng=check_rng)
    return errors


def run_full_check(tolerance: float = 1e-4, seed: int = 0,
                   corrupt_slot: str | None = None):
    """Check both interaction kinds; returns (report lines, all_passed)."""
    lines = []
    ok = True
    for kind in ("DNN", "DEEPFM"):
        errors = check_model(kind=kind, seed=seed, corrupt_slot=corrupt_slot)
        worst = max(errors.values())
        worst_slot = max(errors, key=errors.get)
        passed = worst <= tolerance
        ok = ok and passed
        status = "PASS" if passed else f"FAIL ({worst_slot})"
        lines.append(f"{kind}: max rel err {worst:.3e} [{status}]")
        for sid, err in sorted(errors.items()):
            lines.append(f"  {sid}: {err:.3e}")
    return lines, ok
