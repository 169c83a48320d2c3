"""The incremental-update protocol: warm-up, per-period training, evaluation.

Warm-up trains conventionally on the first ``warmup`` periods (no teacher,
anchoring weight forced to zero).  Every later training period first freezes
the current model as the teacher, then runs mini-batches where, per
iteration: prior CTR estimates and bins are computed once, the auxiliary
prior loss and the main (likelihood + anchoring) loss are both evaluated,
and both optimizer steps are applied at the end -- SGD for the prior logits,
lazy Adam for everything else.  The final period is never trained on; it is
the test set.
"""
from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass, field as dc_field

import numpy as np

from .embedding import Schema
from .interaction import DEEPFM, InteractionConfig
from .metrics import auc, logloss, longtail_split
from .model import CtrModel, ModelConfig
from .model_prior import (TeacherSnapshot, likelihood_loss, prior_loss,
                          snapshot_teacher, total_loss)
from .optim import AdamState, SgdState, adam_step, sgd_step

PLAIN = "PLAIN"
FP_ONLY = "FP_ONLY"
MP_ONLY = "MP_ONLY"
DDP = "DDP"
MODES = (PLAIN, FP_ONLY, MP_ONLY, DDP)

CKPT_MAGIC = "PRIORCTR-CKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class InsufficientPeriods(ValueError):
    pass


class NoTeacher(RuntimeError):
    pass


class VersionMismatch(ValueError):
    pass


class SchemaDigestMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


@dataclass
class RunConfig:
    num_periods: int = 7
    warmup: int = 3
    mode: str = DDP
    batch_size: int = 1024
    epochs: int = 1
    lam: float = 1.0
    num_bins: int = 10
    dim: int = 16
    interaction: str = DEEPFM
    hidden: tuple[int, ...] = (200, 200, 200)
    adam_lr: float = 1e-3
    fp_lr: float = 1e-3              # SGD rate for the prior logits
    fp_optimizer: str = "sgd"        # "sgd" (default) or "adam"
    fp_adam_lr: float = 1e-3
    l2: float = 1e-6
    seed: int = 0
    head_fraction: float = 0.2
    fp_init_logit: float = 0.0
    progressive_eval: bool = False
    checkpoint_dir: str | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 1 <= self.warmup < self.num_periods:
            raise ConfigError("need 1 <= warmup < num_periods")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if min(self.adam_lr, self.fp_lr, self.fp_adam_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.fp_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown fp_optimizer {self.fp_optimizer!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def use_fp(self) -> bool:
        return self.mode in (FP_ONLY, DDP)

    @property
    def use_mp(self) -> bool:
        return self.mode in (MP_ONLY, DDP)

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.use_mp else 0.0


@dataclass
class SplitMetrics:
    split: str
    auc: float
    logloss: float
    n: int


@dataclass
class PeriodReport:
    period: int
    phase: str                       # "train" or "eval"
    splits: list = dc_field(default_factory=list)
    mean_l_likelihood: float = float("nan")
    mean_l_prior: float = float("nan")
    mean_fp_loss: float = float("nan")

    def split(self, name: str) -> SplitMetrics:
        for s in self.splits:
            if s.split == name:
                return s
        raise KeyError(name)


class Trainer:
    """Owns the model and optimizer state for one run."""

    def __init__(self, schema: Schema, config: RunConfig):
        self.schema = schema
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        mc = ModelConfig(dim=config.dim, num_bins=config.num_bins,
                         use_fp=config.use_fp,
                         fp_init_logit=config.fp_init_logit,
                         interaction=InteractionConfig(config.interaction,
                                                       config.hidden),
                         dtype=config.dtype)
        self.model = CtrModel(schema, mc, self.rng)
        self.adam = AdamState(lr=config.adam_lr, weight_decay=config.l2)
        self.sgd = SgdState(lr=config.fp_lr)
        self.phi_adam = AdamState(lr=config.fp_adam_lr)
        self.trained_through = 0     # highest period index consumed so far
        self.item_counts = Counter()  # item frequency over consumed periods

    # -- one mini-batch iteration -----------------------------------------
    def _train_batch(self, batch, teacher: TeacherSnapshot | None, lam: float):
        model = self.model
        model.zero_grads()
        probs, cache = model.forward(batch, training=True)
        fp_loss = 0.0
        if model.fp is not None:
            fp_loss = model.fp_loss_and_grad(cache)
        y = batch.labels.astype(probs.dtype, copy=False)
        l_l = likelihood_loss(probs, y)
        l_p = 0.0
        n = batch.size
        dlogit = (probs - y) / n
        if lam > 0.0:
            if teacher is None:
                raise NoTeacher("anchoring requested before any model exists")
            p_t = teacher.predict(batch)
            l_p = prior_loss(probs, p_t)
            dlogit = dlogit + lam * (probs - p_t) * probs * (1.0 - probs) / n
        model.backward(cache, dlogit)
        # both optimizer steps happen after both losses are computed
        for slot in model.param_slots():
            if slot.id == "C":
                if self.config.fp_optimizer == "adam":
                    adam_step(slot, self.phi_adam)
                else:
                    sgd_step(slot, self.sgd)
            else:
                adam_step(slot, self.adam)
        return l_l, l_p, fp_loss, total_loss(l_l, l_p, lam).total

    def train_period(self, period, teacher, lam: float):
        sums = np.zeros(3)
        count = 0
        for _ in range(self.config.epochs):
            for batch in period.iter_batches(self.config.batch_size):
                l_l, l_p, fp_l, _ = self._train_batch(batch, teacher, lam)
                sums += (l_l, l_p, fp_l)
                count += 1
        return sums / max(count, 1)

    def _consume_items(self, period):
        vals, n = np.unique(period.items, return_counts=True)
        self.item_counts.update(dict(zip(vals.tolist(), n.tolist())))

    def warmup(self, periods):
        """Train on the concatenated warm-up periods with no anchoring."""
        if not periods:
            raise InsufficientPeriods("empty warm-up")
        for p in periods:
            means = self.train_period(p, None, 0.0)
            self._consume_items(p)
            self.trained_through = p.index
        return means

    def incremental_update(self, period):
        """Algorithm: snapshot teacher, then train on the new period."""
        lam = self.config.effective_lambda
        teacher = None
        if lam > 0.0:
            if self.trained_through == 0:
                raise NoTeacher("incremental update before warm-up")
            teacher = snapshot_teacher(self.model, self.trained_through)
        means = self.train_period(period, teacher, lam)
        self._consume_items(period)
        self.trained_through = period.index
        return means

    def predict_period(self, period, batch_size: int | None = None) -> np.ndarray:
        bs = batch_size or self.config.batch_size
        out = np.empty(period.size, dtype=np.float64)
        pos = 0
        for batch in period.iter_batches(bs):
            probs, _ = self.model.forward(batch, training=False)
            out[pos:pos + batch.size] = probs
            pos += batch.size
        return out


def evaluate_period(trainer: Trainer, period, train_item_counts: Counter,
                    head_fraction: float) -> PeriodReport:
    probs = trainer.predict_period(period)
    labels = period.labels
    report = PeriodReport(period.index, "eval")
    report.splits.append(SplitMetrics("ALL", auc(probs, labels),
                                      logloss(probs, labels), period.size))
    if trainer.schema.item_field is not None and train_item_counts:
        short, tail = longtail_split(train_item_counts, period.items, head_fraction)
        for name, mask in (("SHORT_HOT", short), ("LONG_TAIL", tail)):
            if mask.sum() == 0:
                continue
            try:
                a = auc(probs[mask], labels[mask])
            except Exception:
                a = float("nan")
            report.splits.append(SplitMetrics(name, a,
                                              logloss(probs[mask], labels[mask]),
                                              int(mask.sum())))
    return report


def run_protocol(stream, config: RunConfig, trainer: Trainer | None = None):
    """Warm up, update incrementally through period T-1, evaluate on period T.

    A ``trainer`` resumed from a checkpoint may be passed in; training then
    continues from the period after ``trainer.trained_through``.  Returns
    (reports, trainer).
    """
    periods = stream.periods
    t_total = len(periods)
    if t_total < config.num_periods:
        raise InsufficientPeriods(f"stream has {t_total} periods, "
                                  f"config expects {config.num_periods}")
    periods = periods[:config.num_periods]
    w = config.warmup
    reports = []

    if trainer is None:
        trainer = Trainer(stream.schema, config)
    if trainer.trained_through == 0:
        means = trainer.warmup(periods[:w])
        rep = PeriodReport(w, "train")
        rep.mean_l_likelihood, rep.mean_l_prior, rep.mean_fp_loss = means
        reports.append(rep)
        _maybe_checkpoint(trainer, w)

    for period in periods[w:-1]:
        if period.index <= trainer.trained_through:
            continue
        if config.progressive_eval:
            reports.append(evaluate_period(trainer, period, trainer.item_counts,
                                           config.head_fraction))
        means = trainer.incremental_update(period)
        rep = PeriodReport(period.index, "train")
        rep.mean_l_likelihood, rep.mean_l_prior, rep.mean_fp_loss = means
        reports.append(rep)
        _maybe_checkpoint(trainer, period.index)

    reports.append(evaluate_period(trainer, periods[-1], trainer.item_counts,
                                   config.head_fraction))
    return reports, trainer


def _maybe_checkpoint(trainer: Trainer, period: int):
    if trainer.config.checkpoint_dir is None:
        return
    import os
    os.makedirs(trainer.config.checkpoint_dir, exist_ok=True)
    save_checkpoint(trainer, os.path.join(trainer.config.checkpoint_dir,
                                          f"period_{period:03d}.ckpt"))


# -- checkpoint serialization --------------------------------------------------


def _config_to_json(config: RunConfig) -> str:
    d = dataclasses.asdict(config)
    d["hidden"] = list(d["hidden"])
    return json.dumps(d, sort_keys=True)


def _config_from_json(text: str) -> RunConfig:
    d = json.loads(text)
    d["hidden"] = tuple(d["hidden"])
    return RunConfig(**d)


def _gather_arrays(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    arrays = []
    for slot in trainer.model.param_slots():
        arrays.append((f"param/{slot.id}", slot.values))
    for tag, state in (("adam", trainer.adam), ("phi_adam", trainer.phi_adam)):
        for sid in sorted(state.m):
            arrays.append((f"{tag}/m/{sid}", state.m[sid]))
            arrays.append((f"{tag}/v/{sid}", state.v[sid]))
            steps = state.steps[sid]
            if isinstance(steps, np.ndarray):
                arrays.append((f"{tag}/steps/{sid}", steps))
            else:
                arrays.append((f"{tag}/steps/{sid}",
                               np.array([steps], dtype=np.int64)))
    items = sorted(trainer.item_counts.items())
    arrays.append(("items/keys", np.array([k for k, _ in items], dtype=np.int64)))
    arrays.append(("items/counts", np.array([c for _, c in items], dtype=np.int64)))
    return arrays


def save_checkpoint(trainer: Trainer, path):
    """Versioned binary: text header, json manifest, little-endian raw arrays."""
    arrays = _gather_arrays(trainer)
    manifest = [{"name": name, "dtype": str(a.dtype), "shape": list(a.shape)}
                for name, a in arrays]
    header = {
        "magic": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "schema_digest": trainer.schema.digest(),
        "period": trainer.trained_through,
        "config": json.loads(_config_to_json(trainer.config)),
        "rng_state": _jsonable_rng(trainer.rng.bit_generator.state),
        "manifest": manifest,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} v{CKPT_VERSION} {len(head_bytes)}\n".encode())
        fh.write(head_bytes)
        fh.write(b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def _jsonable_rng(state):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__ndarray__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return conv(state)


def _rng_from_jsonable(state):
    def conv(x):
        if isinstance(x, dict):
            if "__ndarray__" in x:
                return np.array(x["__ndarray__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(state)


def load_checkpoint(path, schema: Schema) -> Trainer:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CorruptFile(str(path)) from exc
    with fh:
        first = fh.readline().decode("utf-8", errors="replace").split()
        if len(first) != 3 or first[0] != CKPT_MAGIC:
            raise CorruptFile("bad header line")
        if first[1] != f"v{CKPT_VERSION}":
            raise VersionMismatch(first[1])
        try:
            head_len = int(first[2])
            header = json.loads(fh.read(head_len).decode("utf-8"))
            fh.read(1)  # trailing newline
        except (ValueError, json.JSONDecodeError) as exc:
            raise CorruptFile("unreadable header") from exc
        if header.get("schema_digest") != schema.digest():
            raise SchemaDigestMismatch(header.get("schema_digest", "?"))
        config = _config_from_json(json.dumps(header["config"]))
        trainer = Trainer(schema, config)
        trainer.trained_through = int(header["period"])
        trainer.rng.bit_generator.state = _rng_from_jsonable(header["rng_state"])
        blobs = {}
        for entry in header["manifest"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CorruptFile(f"truncated array {entry['name']}")
            blobs[entry["name"]] = np.frombuffer(
                raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    params = {name.split("/", 1)[1]: a for name, a in blobs.items()
              if name.startswith("param/")}
    trainer.model.load_state_arrays(params)
    for tag, state in (("adam", trainer.adam), ("phi_adam", trainer.phi_adam)):
        for name, a in blobs.items():
            if not name.startswith(f"{tag}/"):
                continue
            _, kind, sid = name.split("/", 2)
            if kind == "m":
                state.m[sid] = a.copy()
            elif kind == "v":
                state.v[sid] = a.copy()
            elif kind == "steps":
                slot = next(s for s in trainer.model.param_slots() if s.id == sid)
                state.steps[sid] = a.copy() if slot.sparse else int(a[0])
    if "items/keys" in blobs:
        trainer.item_counts = Counter(dict(zip(blobs["items/keys"].tolist(),
                                               blobs["items/counts"].tolist())))
    return trainer
