"""The assembled CTR model: embeddings, optional feature prior, interaction.

Forward produces click probabilities for a columnar batch; backward routes the
main-loss gradient into the interaction weights, embedding rows and bin-
embedding rows.  The prior-logit vector C never receives main-loss gradient:
bins are constants within a step and C is trained only through its own loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .embedding import Batch, EmbeddingTable, Schema
from .feature_prior import FeaturePriorLayer, concat_prior
from .interaction import InteractionConfig, SparseContext, build_interaction
from .nn_core import sigmoid


@dataclass
class ModelConfig:
    dim: int = 16
    num_bins: int = 10
    use_fp: bool = True
    fp_init_logit: float = 0.0
    interaction: InteractionConfig = dc_field(default_factory=InteractionConfig)
    dtype: str = "float64"           # "float64" or "float32" (fast build)

    def np_dtype(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        return np.dtype(self.dtype)


class ModelCache:
    __slots__ = ("batch", "inter_cache", "shat", "bin_rows", "logit", "probs")

    def __init__(self, batch, inter_cache, shat, bin_rows, logit, probs):
        self.batch = batch
        self.inter_cache = inter_cache
        self.shat = shat
        self.bin_rows = bin_rows
        self.logit = logit
        self.probs = probs


class CtrModel:
    def __init__(self, schema: Schema, config: ModelConfig,
                 rng: np.random.Generator):
        self.schema = schema
        self.config = config
        dtype = config.np_dtype()
        self.embedding = EmbeddingTable(schema, config.dim, rng, dtype=dtype)
        self.fp = None
        num_bin_rows = 0
        input_fields = schema.num_fields
        if config.use_fp:
            self.fp = FeaturePriorLayer(schema, config.num_bins, config.dim, rng,
                                        init_logit=config.fp_init_logit,
                                        dtype=dtype)
            num_bin_rows = schema.num_fields * config.num_bins
            input_fields = 2 * schema.num_fields
        self.interaction = build_interaction(
            config.interaction, input_fields, config.dim, rng,
            num_raw_values=schema.total_values, num_bin_rows=num_bin_rows,
            dtype=dtype)

    # -- parameter registry ------------------------------------------------
    def param_slots(self):
        slots = [self.embedding.slot]
        if self.fp is not None:
            slots += [self.fp.c_slot, self.fp.u_slot]
        slots += self.interaction.param_slots()
        return slots

    def theta_slots(self):
        return [s for s in self.param_slots() if s.id != "C"]

    def zero_grads(self):
        for s in self.param_slots():
            s.zero_grad()

    # -- forward / backward ------------------------------------------------
    def forward(self, batch: Batch, training: bool = False):
        e = self.embedding.lookup(batch)
        shat = None
        bin_rows = None
        if self.fp is not None:
            shat = self.fp.forward(batch)
            bins = self.fp.bin_indices(shat)
            o, bin_rows = self.fp.build_prior_embedding(bins)
            x = concat_prior(e, o)
        else:
            x = e
        ctx = SparseContext(batch, bin_rows)
        logit, inter_cache = self.interaction.forward(x, ctx, training=training)
        probs = sigmoid(logit)
        if not training:
            return probs, None
        return probs, ModelCache(batch, inter_cache, shat, bin_rows, logit, probs)

    def backward(self, cache: ModelCache, dlogit: np.ndarray):
        dx = self.interaction.backward(cache.inter_cache, dlogit)
        m = self.schema.num_fields
        de = dx[:, :m, :]
        self.embedding.scatter_grad(cache.batch, de)
        if self.fp is not None:
            do = dx[:, m:, :]
            self.fp.scatter_prior_grad(cache.bin_rows, do)

    def fp_loss_and_grad(self, cache: ModelCache) -> float:
        """Auxiliary prior loss on the cached batch; accumulates into C only."""
        return self.fp.fp_loss_and_grad(cache.batch, cache.shat)

    # -- state -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {s.id: s.values for s in self.param_slots()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for s in self.param_slots():
            if s.id not in arrays:
                raise KeyError(f"missing parameter block {s.id!r}")
            if arrays[s.id].shape != s.values.shape:
                raise ValueError(f"shape mismatch for {s.id!r}")
            s.values[...] = arrays[s.id]
