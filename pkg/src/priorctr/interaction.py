"""Interaction modules mapping the concatenated field embeddings to a click logit.

Two implementations ship: a plain ReLU MLP (DNN) and DeepFM (the same deep
part plus an explicit second-order factorization-machine term computed with
the sum-of-squares identity, and a first-order term over raw feature indices
and prior bins).  Backward passes are hand-derived.  The caller applies the
output sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import ADAM_GROUP, ParamSlot
from .embedding import Batch


class DimMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    """A forward cache was consumed twice."""


DNN = "DNN"
DEEPFM = "DEEPFM"


@dataclass
class InteractionConfig:
    kind: str = DEEPFM
    hidden: tuple[int, ...] = (200, 200, 200)

    def __post_init__(self):
        if self.kind not in (DNN, DEEPFM):
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")


@dataclass
class SparseContext:
    """Raw-index and bin-row information the FM first-order term consumes."""

    batch: Batch
    bin_rows: np.ndarray | None  # (n, M) stacked U-row ids, or None without FP


def _glorot(rng, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class _Cache:
    __slots__ = ("acts", "x_shape", "ctx", "used", "x")

    def __init__(self, acts, x_shape, ctx):
        self.acts = acts
        self.x_shape = x_shape
        self.ctx = ctx
        self.used = False

    def consume(self):
        if self.used:
            raise StaleCache("forward cache already consumed")
        self.used = True


class DnnInteraction:
    """ReLU MLP from flattened e' to a single logit."""

    def __init__(self, config: InteractionConfig, input_fields: int, dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.input_width = input_fields * dim
        sizes = [self.input_width, *config.hidden, 1]
        self.weights, self.biases = [], []
        for i in range(len(sizes) - 1):
            w = ParamSlot(f"W{i}", _glorot(rng, sizes[i], sizes[i + 1], dtype))
            b = ParamSlot(f"b{i}", np.zeros((1, sizes[i + 1]), dtype=dtype))
            self.weights.append(w)
            self.biases.append(b)

    def param_slots(self):
        return [s for pair in zip(self.weights, self.biases) for s in pair]

    def forward(self, x: np.ndarray, ctx: SparseContext | None = None,
                training: bool = False):
        n = x.shape[0]
        if x.shape[1] * x.shape[2] != self.input_width:
            raise DimMismatch(f"expected width {self.input_width}, got {x.shape}")
        a = x.reshape(n, -1)
        acts = [a] if training else None
        nlayers = len(self.weights)
        for i in range(nlayers - 1):
            a = np.maximum(a @ self.weights[i].values + self.biases[i].values, 0.0)
            if training:
                acts.append(a)
        logit = (a @ self.weights[-1].values + self.biases[-1].values)[:, 0]
        cache = _Cache(acts, x.shape, ctx) if training else None
        return logit, cache

    def backward(self, cache: _Cache, dlogit: np.ndarray) -> np.ndarray:
        cache.consume()
        g = dlogit[:, None]
        for i in range(len(self.weights) - 1, -1, -1):
            a = cache.acts[i]
            self.weights[i].grad += a.T @ g
            self.biases[i].grad += g.sum(axis=0, keepdims=True)
            g = g @ self.weights[i].values.T
            if i > 0:
                g = g * (a > 0)
        return g.reshape(cache.x_shape)


def fm_second_order(x: np.ndarray) -> np.ndarray:
    """Sum over i<j of <v_i, v_j> via 0.5 * ((sum v)^2 - sum v^2)."""
    s = x.sum(axis=1)
    return 0.5 * ((s ** 2).sum(axis=1) - (x ** 2).sum(axis=(1, 2)))


class DeepFmInteraction:
    """Deep part + FM second order over all e' field vectors + first-order term.

    The first-order term keeps a weight per raw sparse value (mean-pooled per
    field, matching the embedding pooling) and, when prior bins are present,
    a weight per (field, bin).
    """

    def __init__(self, config: InteractionConfig, input_fields: int, dim: int,
                 rng: np.random.Generator, num_raw_values: int,
                 num_bin_rows: int = 0, dtype=np.float64):
        self.deep = DnnInteraction(config, input_fields, dim, rng, dtype)
        self.w_raw = ParamSlot("w_raw", np.zeros((num_raw_values, 1), dtype=dtype),
                               update_rule=ADAM_GROUP, sparse=True)
        self.w_bin = None
        if num_bin_rows > 0:
            self.w_bin = ParamSlot("w_bin", np.zeros((num_bin_rows, 1), dtype=dtype),
                                   update_rule=ADAM_GROUP, sparse=True)

    def param_slots(self):
        slots = self.deep.param_slots() + [self.w_raw]
        if self.w_bin is not None:
            slots.append(self.w_bin)
        return slots

    def _first_order(self, ctx: SparseContext) -> np.ndarray:
        batch = ctx.batch
        n = batch.size
        out = np.zeros(n, dtype=self.w_raw.values.dtype)
        w = self.w_raw.values[:, 0]
        for j in range(len(batch.field_indices)):
            pooled, _ = batch.pooled(w, j)
            out += pooled
        if self.w_bin is not None and ctx.bin_rows is not None:
            out += self.w_bin.values[ctx.bin_rows.reshape(-1), 0].reshape(n, -1).sum(axis=1)
        return out

    def forward(self, x: np.ndarray, ctx: SparseContext | None = None,
                training: bool = False):
        logit, cache = self.deep.forward(x, ctx, training=training)
        logit = logit + fm_second_order(x)
        if ctx is not None:
            logit = logit + self._first_order(ctx)
        if training:
            cache.ctx = ctx
            cache.x = x
        return logit, cache

    def backward(self, cache, dlogit: np.ndarray) -> np.ndarray:
        ctx = cache.ctx
        x = cache.x
        dx = self.deep.backward(cache, dlogit)
        s = x.sum(axis=1)
        dx = dx + dlogit[:, None, None] * (s[:, None, :] - x)
        if ctx is not None:
            batch = ctx.batch
            all_idx, all_rows = [], []
            for j in range(len(batch.field_indices)):
                idx = batch.field_indices[j]
                off = batch.field_offsets[j]
                if off is None:
                    rows = dlogit
                else:
                    counts = np.diff(off).astype(dlogit.dtype)
                    rows = np.repeat(dlogit / counts, np.diff(off))
                all_idx.append(idx)
                all_rows.append(rows)
            self.w_raw.add_sparse_grad(np.concatenate(all_idx),
                                       np.concatenate(all_rows)[:, None])
            if self.w_bin is not None and ctx.bin_rows is not None:
                n, m = ctx.bin_rows.shape
                self.w_bin.add_sparse_grad(
                    ctx.bin_rows.reshape(-1),
                    np.repeat(dlogit, m)[:, None],
                )
        return dx


def build_interaction(config: InteractionConfig, input_fields: int, dim: int,
                      rng: np.random.Generator, num_raw_values: int,
                      num_bin_rows: int = 0, dtype=np.float64):
    if config.kind == DNN:
        return DnnInteraction(config, input_fields, dim, rng, dtype)
    return DeepFmInteraction(config, input_fields, dim, rng,
                             num_raw_values, num_bin_rows, dtype)
