"""Per-feature-value CTR prior: logit vector, auxiliary loss, binning, bin embeddings.

The prior vector C holds one logit per sparse feature value and is trained
only by its own BCE loss (never by the main objective).  Its sigmoid output
is discretized into B bins, equal-width in sqrt-CTR space, and each field's
bin indexes a small bin-embedding table whose rows ARE trained by the main
objective.  The floor step is a stop-gradient: bins are constants within a
training step.
"""
from __future__ import annotations

import numpy as np

from .nn_core import ADAM_GROUP, SGD_GROUP, ParamSlot, sigmoid
from .embedding import Batch, Schema


class DimMismatch(ValueError):
    pass


def discretize(shat, num_bins: int):
    """Bin index min(floor(B * sqrt(s)), B-1); monotone, finer near zero."""
    s = np.asarray(shat, dtype=np.float64)
    bins = np.minimum(np.floor(num_bins * np.sqrt(s)).astype(np.int64), num_bins - 1)
    if bins.ndim == 0:
        return int(bins)
    return bins


class FeaturePriorLayer:
    """Holds C (prior logits, SGD group) and U (bin embeddings, Adam group)."""

    def __init__(self, schema: Schema, num_bins: int, dim: int,
                 rng: np.random.Generator, init_scale: float = 0.01,
                 init_logit: float = 0.0, dtype=np.float64):
        if num_bins < 2:
            raise ValueError("need at least 2 bins")
        self.schema = schema
        self.num_bins = num_bins
        self.dim = dim
        c0 = np.full((schema.total_values, 1), float(init_logit), dtype=dtype)
        self.c_slot = ParamSlot("C", c0, update_rule=SGD_GROUP, sparse=True)
        # M tables of shape (B, d), stored stacked as (M*B, d) for lazy updates
        u0 = rng.uniform(-init_scale, init_scale,
                         size=(schema.num_fields * num_bins, dim)).astype(dtype)
        self.u_slot = ParamSlot("U", u0, update_rule=ADAM_GROUP, sparse=True)

    def forward(self, batch: Batch) -> np.ndarray:
        """Estimated CTR per field, shape (n, M); multi-hot pools logits by mean."""
        n, m = batch.size, self.schema.num_fields
        logits = np.empty((n, m), dtype=self.c_slot.values.dtype)
        for j in range(m):
            pooled, _ = batch.pooled(self.c_slot.values[:, 0], j)
            logits[:, j] = pooled
        return sigmoid(logits)

    def fp_loss_and_grad(self, batch: Batch, shat: np.ndarray) -> float:
        """Mean-over-batch auxiliary loss; accumulates dL/dC into the C slot.

        Per instance the loss averages BCE(s_i, y) over the M fields, so for a
        one-hot field dL/dC[idx] = (s_i - y) / (M * n).
        """
        n, m = shat.shape
        y = batch.labels.astype(shat.dtype, copy=False)
        from .nn_core import bce
        loss = float(np.mean(np.mean(bce(shat, y[:, None]), axis=1)))
        dlogit = (shat - y[:, None]) / (m * n)          # (n, M)
        all_idx, all_rows = [], []
        for j in range(m):
            idx = batch.field_indices[j]
            off = batch.field_offsets[j]
            up = dlogit[:, j]
            if off is None:
                rows = up
            else:
                counts = np.diff(off).astype(up.dtype)
                rows = np.repeat(up / counts, np.diff(off))
            all_idx.append(idx)
            all_rows.append(rows)
        self.c_slot.add_sparse_grad(np.concatenate(all_idx),
                                    np.concatenate(all_rows)[:, None])
        return loss

    def bin_indices(self, shat: np.ndarray) -> np.ndarray:
        return discretize(shat, self.num_bins)

    def build_prior_embedding(self, bins: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bin-embedding vectors o of shape (n, M, d) plus the stacked row ids used."""
        n, m = bins.shape
        rows = bins + np.arange(m, dtype=np.int64)[None, :] * self.num_bins
        o = self.u_slot.values[rows.reshape(-1)].reshape(n, m, self.dim)
        return o, rows

    def scatter_prior_grad(self, rows: np.ndarray, upstream: np.ndarray):
        """Accumulate main-loss gradient into touched U rows; C receives nothing."""
        n, m = rows.shape
        self.u_slot.add_sparse_grad(rows.reshape(-1), upstream.reshape(n * m, self.dim))


def concat_prior(e: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Concatenate field embeddings and prior embeddings along the field axis."""
    if e.shape != o.shape:
        raise DimMismatch(f"{e.shape} vs {o.shape}")
    return np.concatenate([e, o], axis=1)
