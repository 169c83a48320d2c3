"""Feature schema, categorical encoding, and the sparse embedding table.

Raw categorical values map into a fixed global index space via the hashing
trick (per-field offset + crc32(value) mod vocab), or directly for fields
declared ``indexed`` (used by the synthetic generator, whose values are
already integer ids).  Batches are kept columnar: per field either a flat
index array (one-hot) or a CSR-style (indices, offsets) pair (multi-hot).
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass

import numpy as np

from .nn_core import ADAM_GROUP, ParamSlot


class UnknownField(KeyError):
    """Raw instance carries a field absent from the schema."""


class EmptyMultihot(ValueError):
    """A multi-hot field was given zero values."""


class IndexOutOfRange(IndexError):
    """A global feature index falls outside its field's offset range."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int
    multi_hot: bool = False
    # indexed fields take integer raw values in [0, vocab) verbatim
    indexed: bool = False


@dataclass
class Schema:
    fields: list[FieldSpec]
    item_field: str | None = None

    def __post_init__(self):
        if not self.fields:
            raise ValueError("schema needs at least one field")
        offsets = []
        off = 0
        for f in self.fields:
            if f.vocab < 1:
                raise ValueError(f"field {f.name!r} has empty vocabulary")
            offsets.append(off)
            off += f.vocab
        self.offsets = offsets
        self.total_values = off
        self.field_index = {f.name: i for i, f in enumerate(self.fields)}
        if self.item_field is not None and self.item_field not in self.field_index:
            raise UnknownField(self.item_field)

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def item_field_pos(self) -> int | None:
        if self.item_field is None:
            return None
        return self.field_index[self.item_field]

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.fields:
            h.update(f"{f.name}|{f.vocab}|{int(f.multi_hot)}|{int(f.indexed)};".encode())
        h.update(f"item={self.item_field}".encode())
        return h.hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for f in self.fields:
            kind = "multihot" if f.multi_hot else "onehot"
            mode = "indexed" if f.indexed else "hashed"
            lines.append(f"field {f.name} {f.vocab} {kind} {mode}")
        if self.item_field is not None:
            lines.append(f"item_field {self.item_field}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Schema":
        fields, item = [], None
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "field":
                if len(parts) not in (4, 5):
                    raise ValueError(f"schema line {ln}: expected 'field name vocab kind [mode]'")
                kind = parts[3]
                mode = parts[4] if len(parts) == 5 else "hashed"
                fields.append(FieldSpec(parts[1], int(parts[2]),
                                        multi_hot=(kind == "multihot"),
                                        indexed=(mode == "indexed")))
            elif parts[0] == "item_field":
                item = parts[1]
            else:
                raise ValueError(f"schema line {ln}: unknown directive {parts[0]!r}")
        return cls(fields, item_field=item)


def _hash_value(value: str, vocab: int) -> int:
    return zlib.crc32(value.encode("utf-8")) % vocab


@dataclass
class EncodedInstance:
    """Per-field global index lists plus the click label."""

    field_indices: list[list[int]]
    label: int
    item_id: int = -1


def encode(raw: dict, schema: Schema) -> EncodedInstance:
    """Map raw field values to global indices; deterministic for a fixed schema."""
    for name in raw:
        if name not in schema.field_index and name not in ("label", "period"):
            raise UnknownField(name)
    indices: list[list[int]] = []
    for pos, f in enumerate(schema.fields):
        if f.name not in raw:
            raise UnknownField(f.name)
        vals = raw[f.name]
        if not f.multi_hot:
            vals = [vals]
        elif not isinstance(vals, (list, tuple)):
            vals = [v for v in str(vals).split("|") if v != ""]
        if len(vals) == 0:
            raise EmptyMultihot(f.name)
        off = schema.offsets[pos]
        idx = []
        for v in vals:
            if f.indexed:
                j = int(v)
                if not 0 <= j < f.vocab:
                    raise IndexOutOfRange(f"{f.name}={v}")
            else:
                j = _hash_value(str(v), f.vocab)
            idx.append(off + j)
        indices.append(idx)
    label = int(raw["label"])
    item_pos = schema.item_field_pos
    item = indices[item_pos][0] if item_pos is not None else -1
    return EncodedInstance(indices, label, item_id=item)


class Batch:
    """Columnar mini-batch: per-field index arrays plus labels and item ids."""

    def __init__(self, field_indices, field_offsets, labels, items):
        self.field_indices = field_indices      # list of (k,) int arrays
        self.field_offsets = field_offsets      # list of (n+1,) arrays or None
        self.labels = labels                    # (n,) float64
        self.items = items                      # (n,) int
        self.size = labels.shape[0]

    @classmethod
    def from_instances(cls, instances: list[EncodedInstance]) -> "Batch":
        m = len(instances[0].field_indices)
        fi, fo = [], []
        for j in range(m):
            counts = [len(inst.field_indices[j]) for inst in instances]
            flat = np.fromiter(
                (i for inst in instances for i in inst.field_indices[j]),
                dtype=np.int64,
            )
            if all(c == 1 for c in counts):
                fi.append(flat)
                fo.append(None)
            else:
                fi.append(flat)
                fo.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        labels = np.array([inst.label for inst in instances], dtype=np.float64)
        items = np.array([inst.item_id for inst in instances], dtype=np.int64)
        return cls(fi, fo, labels, items)

    def pooled(self, table: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray | None]:
        """Mean-pool rows of ``table`` for field ``j``.

        Returns (pooled values of shape (n, ...) , per-instance set sizes or
        None for the one-hot fast path).
        """
        idx = self.field_indices[j]
        off = self.field_offsets[j]
        rows = table[idx]
        if off is None:
            return rows, None
        sums = np.add.reduceat(rows, off[:-1], axis=0)
        counts = np.diff(off).astype(rows.dtype)
        shape = (-1,) + (1,) * (rows.ndim - 1)
        return sums / counts.reshape(shape), counts


class EmbeddingTable:
    """Dense N x d table with mean pooling and sparse gradient scatter."""

    def __init__(self, schema: Schema, dim: int, rng: np.random.Generator,
                 init_scale: float = 0.01, slot_id: str = "E",
                 dtype=np.float64):
        if dim <= 0:
            raise ValueError("embedding dim must be positive")
        self.schema = schema
        self.dim = dim
        values = rng.uniform(-init_scale, init_scale,
                             size=(schema.total_values, dim)).astype(dtype)
        self.slot = ParamSlot(slot_id, values, update_rule=ADAM_GROUP, sparse=True)

    def lookup(self, batch: Batch) -> np.ndarray:
        """Return pooled field embeddings of shape (n, M, d)."""
        n, m = batch.size, self.schema.num_fields
        out = np.empty((n, m, self.dim), dtype=self.slot.values.dtype)
        for j in range(m):
            idx = batch.field_indices[j]
            if idx.size and (idx.min() < 0 or idx.max() >= self.schema.total_values):
                raise IndexOutOfRange(f"field {j}")
            pooled, _ = batch.pooled(self.slot.values, j)
            out[:, j, :] = pooled
        return out

    def scatter_grad(self, batch: Batch, upstream: np.ndarray):
        """Accumulate d(loss)/d(rows) from per-field upstream of shape (n, M, d).

        Mean pooling means each member row of a multi-hot set receives
        upstream / |set|.
        """
        all_idx, all_rows = [], []
        for j in range(self.schema.num_fields):
            idx = batch.field_indices[j]
            off = batch.field_offsets[j]
            up = upstream[:, j, :]
            if off is None:
                rows = up
            else:
                counts = np.diff(off).astype(up.dtype)
                rows = np.repeat(up / counts[:, None], np.diff(off), axis=0)
            all_idx.append(idx)
            all_rows.append(rows)
        # one accumulation across all fields; indices never collide between
        # fields (disjoint offset ranges) but one sort beats M sorts + merges
        self.slot.add_sparse_grad(np.concatenate(all_idx),
                                  np.concatenate(all_rows))
