"""Period-partitioned data streams: CSV ingestion and a synthetic drift generator.

Periods are stored columnar (per-field index arrays, labels, item ids) so
training and evaluation stay vectorized.  The synthetic generator draws
feature values from per-period exposure distributions while holding each
value's conditional CTR fixed, i.e. exposure drifts but the feature-level
click statistics do not -- with closed-form ground truth returned alongside.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from .embedding import Batch, EncodedInstance, Schema, FieldSpec, encode
from .nn_core import sigmoid


class MissingColumn(ValueError):
    pass


class UnreadableFile(OSError):
    pass


class EmptyStream(ValueError):
    pass


class PeriodOutOfRange(ValueError):
    pass


class InvalidDistribution(ValueError):
    pass


class Period:
    """One period's instances in columnar form."""

    def __init__(self, index: int, field_indices, field_offsets, labels, items):
        self.index = index
        self.field_indices = [np.asarray(a, dtype=np.int64) for a in field_indices]
        self.field_offsets = [None if o is None else np.asarray(o, dtype=np.int64)
                              for o in field_offsets]
        self.labels = np.asarray(labels, dtype=np.float64)
        self.items = np.asarray(items, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def slice_batch(self, a: int, b: int) -> Batch:
        fi, fo = [], []
        for idx, off in zip(self.field_indices, self.field_offsets):
            if off is None:
                fi.append(idx[a:b])
                fo.append(None)
            else:
                fi.append(idx[off[a]:off[b]])
                fo.append(off[a:b + 1] - off[a])
        return Batch(fi, fo, self.labels[a:b], self.items[a:b])

    def iter_batches(self, batch_size: int):
        for a in range(0, self.size, batch_size):
            yield self.slice_batch(a, min(a + batch_size, self.size))

    def as_batch(self) -> Batch:
        return self.slice_batch(0, self.size)

    @classmethod
    def from_instances(cls, index: int, instances: list[EncodedInstance]) -> "Period":
        m = len(instances[0].field_indices)
        fi, fo = [], []
        for j in range(m):
            counts = [len(inst.field_indices[j]) for inst in instances]
            flat = [i for inst in instances for i in inst.field_indices[j]]
            if all(c == 1 for c in counts):
                fi.append(flat)
                fo.append(None)
            else:
                fi.append(flat)
                fo.append(np.concatenate([[0], np.cumsum(counts)]))
        labels = [inst.label for inst in instances]
        items = [inst.item_id for inst in instances]
        return cls(index, fi, fo, labels, items)


@dataclass
class PeriodStream:
    schema: Schema
    periods: list
    skipped: int = 0

    @property
    def num_periods(self) -> int:
        return len(self.periods)

    def training_periods(self):
        """All periods except the last (test) one."""
        return self.periods[:-1]


def split_periods(pairs, num_periods: int) -> list[list[EncodedInstance]]:
    """Stable partition of (period, instance) pairs into D_1..D_T."""
    out = [[] for _ in range(num_periods)]
    for period, inst in pairs:
        if not 1 <= period <= num_periods:
            raise PeriodOutOfRange(str(period))
        out[period - 1].append(inst)
    return out


def ingest_csv(path, schema: Schema, num_periods: int | None = None,
               label_col: str = "label", period_col: str = "period") -> PeriodStream:
    """Streaming CSV parse; malformed rows are counted and skipped."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise UnreadableFile(str(path)) from exc
    skipped = 0
    pairs = []
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (label_col, period_col, *(f.name for f in schema.fields)):
            if col not in header:
                raise MissingColumn(col)
        for row in reader:
            try:
                label = row[label_col]
                if label not in ("0", "1"):
                    raise ValueError(label)
                period = int(row[period_col])
                raw = {f.name: row[f.name] for f in schema.fields}
                for name, v in raw.items():
                    if v is None or v == "":
                        raise ValueError(name)
                raw["label"] = int(label)
                inst = encode(raw, schema)
            except (ValueError, KeyError, TypeError):
                skipped += 1
                continue
            pairs.append((period, inst))
    if not pairs:
        raise EmptyStream(str(path))
    if num_periods is None:
        num_periods = max(p for p, _ in pairs)
    buckets = split_periods(pairs, num_periods)
    periods = [Period.from_instances(t + 1, insts) if insts else
               Period(t + 1, [[] for _ in schema.fields],
                      [None] * schema.num_fields, [], [])
               for t, insts in enumerate(buckets)]
    return PeriodStream(schema, periods, skipped=skipped)


# -- synthetic drift generator -------------------------------------------------


@dataclass
class SynthConfig:
    num_fields: int = 3
    vocab: int = 50
    num_periods: int = 7
    instances_per_period: int = 20000
    seed: int = 0
    base_logit: float = -1.386          # sigmoid ~= 0.2 baseline CTR
    contrib_scale: float = 1.2          # per-value logit contributions U(-s, s)
    zipf_exponent: float = 1.3          # exposure skew within a field
    drift_period: int | None = 5        # first period drawn from shifted exposure
    drift_sharpness: float = 1.0        # 1 = full switch to the shifted mixture

    def __post_init__(self):
        if self.num_fields < 1 or self.vocab < 2:
            raise ValueError("need at least one field and two values")
        if not 0.0 <= self.drift_sharpness <= 1.0:
            raise ValueError("drift_sharpness must be in [0, 1]")


@dataclass
class GroundTruth:
    base_logit: float
    contribs: list          # per field: (vocab,) logit contributions
    exposures: list         # per period: list per field of (vocab,) probs
    true_p: list = dc_field(default_factory=list)   # per period: (n,) true click prob


def _zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def synth_schema(config: SynthConfig) -> Schema:
    fields = [FieldSpec(f"f{j}", config.vocab, indexed=True)
              for j in range(config.num_fields)]
    return Schema(fields, item_field="f0")


def _partner(v: int) -> np.ndarray:
    """Pair values (0,1), (2,3), ...; an odd trailing value partners itself."""
    p = np.arange(v)
    p[0:v - v % 2] ^= 1
    return p


def synth_drift(config: SynthConfig) -> tuple[PeriodStream, GroundTruth]:
    """Exposure-mixture drift with period-invariant per-value conditional CTR.

    Each field's values come in pairs sharing one logit contribution; the
    drift swaps exposure within every pair.  Because a value's partner
    contributes identically, the exposure-weighted contribution distribution
    of every field is unchanged by the swap, so the conditional CTR of any
    feature value (marginalized over co-occurring fields) is exactly
    period-invariant -- only which values are frequent changes.
    """
    rng = np.random.default_rng(config.seed)
    schema = synth_schema(config)
    m, v, t, n = (config.num_fields, config.vocab,
                  config.num_periods, config.instances_per_period)

    contribs = [
        np.repeat(rng.uniform(-config.contrib_scale, config.contrib_scale,
                              size=(v + 1) // 2), 2)[:v]
        for _ in range(m)
    ]
    ranked = _zipf_probs(v, config.zipf_exponent)
    base_perm = [rng.permutation(v) for _ in range(m)]
    partner = _partner(v)

    def exposure(j: int, period: int) -> np.ndarray:
        p0 = np.empty(v)
        p0[base_perm[j]] = ranked
        if config.drift_period is None or period < config.drift_period:
            return p0
        p1 = p0[partner]
        mix = config.drift_sharpness * p1 + (1.0 - config.drift_sharpness) * p0
        return mix / mix.sum()

    truth = GroundTruth(config.base_logit, contribs, exposures=[])
    periods = []
    for period in range(1, t + 1):
        exp_t = [exposure(j, period) for j in range(m)]
        for p in exp_t:
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise InvalidDistribution("exposure must be a probability vector")
        truth.exposures.append(exp_t)
        vals = [rng.choice(v, size=n, p=exp_t[j]) for j in range(m)]
        logits = config.base_logit + sum(contribs[j][vals[j]] for j in range(m))
        p_true = sigmoid(logits)
        labels = (rng.random(n) < p_true).astype(np.float64)
        fi = [vals[j] + schema.offsets[j] for j in range(m)]
        periods.append(Period(period, fi, [None] * m, labels, fi[0]))
        truth.true_p.append(p_true)
    return PeriodStream(schema, periods), truth


def write_synth_csv(stream: PeriodStream, truth: GroundTruth,
                    data_path, truth_path):
    """Emit the stream as a trainable CSV plus the ground-truth contributions."""
    schema = stream.schema
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "label", *(f.name for f in schema.fields)])
        for period in stream.periods:
            for i in range(period.size):
                row = [period.index, int(period.labels[i])]
                for j, f in enumerate(schema.fields):
                    row.append(int(period.field_indices[j][i]) - schema.offsets[j])
                w.writerow(row)
    with open(truth_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "value", "contribution"])
        w.writerow(["_base", "", f"{truth.base_logit:.12g}"])
        for j, f in enumerate(schema.fields):
            for val, c in enumerate(truth.contribs[j]):
                w.writerow([f.name, val, f"{c:.12g}"])
