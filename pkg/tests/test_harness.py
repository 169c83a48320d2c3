"""Training protocol, run configuration, and checkpoint round-trips."""
import numpy as np
import pytest

from priorctr.harness import (DDP, FP_ONLY, MP_ONLY, PLAIN, ConfigError,
                              CorruptFile, InsufficientPeriods, NoTeacher,
                              RunConfig, SchemaDigestMismatch, Trainer,
                              VersionMismatch, evaluate_period,
                              load_checkpoint, run_protocol, save_checkpoint)
from priorctr.stream import SynthConfig, synth_drift


def small_stream(seed=0, periods=5, per_period=600, **kw):
    cfg = SynthConfig(num_fields=2, vocab=8, num_periods=periods,
                      instances_per_period=per_period, seed=seed,
                      drift_period=None, **kw)
    return synth_drift(cfg)[0]


def small_config(**kw):
    base = dict(num_periods=5, warmup=2, mode=DDP, batch_size=64,
                dim=4, hidden=(8,), num_bins=4, seed=0)
    base.update(kw)
    return RunConfig(**base)


class TestRunConfig:
    def test_mode_flags(self):
        assert small_config(mode=PLAIN).use_fp is False
        assert small_config(mode=PLAIN).use_mp is False
        assert small_config(mode=FP_ONLY).use_fp is True
        assert small_config(mode=MP_ONLY).use_mp is True
        assert small_config(mode=DDP).use_fp and small_config(mode=DDP).use_mp

    def test_effective_lambda_zero_without_mp(self):
        assert small_config(mode=FP_ONLY, lam=0.0).effective_lambda == 0.0
        assert small_config(mode=DDP, lam=2.0).effective_lambda == 2.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            small_config(mode="BOGUS")
        with pytest.raises(ConfigError):
            small_config(warmup=5)
        with pytest.raises(ConfigError):
            small_config(lam=-1.0)
        with pytest.raises(ConfigError):
            small_config(adam_lr=0.0)
        with pytest.raises(ConfigError):
            small_config(fp_optimizer="rmsprop")
        with pytest.raises(ConfigError):
            small_config(dtype="float16")


class TestProtocol:
    def test_full_run_produces_reports(self):
        stream = small_stream()
        reports, trainer = run_protocol(stream, small_config())
        phases = [(r.period, r.phase) for r in reports]
        assert phases == [(2, "train"), (3, "train"), (4, "train"),
                          (5, "eval")]
        assert trainer.trained_through == 4
        final = reports[-1]
        assert 0.0 <= final.split("ALL").auc <= 1.0
        assert {s.split for s in final.splits} >= {"ALL"}

    def test_test_period_never_trained(self):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        # item counts only cover the 4 training periods
        total = sum(trainer.item_counts.values())
        assert total == sum(p.size for p in stream.periods[:4])

    def test_training_loss_decreases_over_warmup(self):
        stream = small_stream(per_period=3000)
        cfg = small_config(adam_lr=1e-2)
        trainer = Trainer(stream.schema, cfg)
        first = trainer.train_period(stream.periods[0], None, 0.0)
        for p in stream.periods[1:4]:
            last = trainer.train_period(p, None, 0.0)
        assert last[0] < first[0]

    def test_insufficient_periods_rejected(self):
        stream = small_stream(periods=3)
        with pytest.raises(InsufficientPeriods):
            run_protocol(stream, small_config(num_periods=5))

    def test_anchoring_without_warmup_rejected(self):
        stream = small_stream()
        trainer = Trainer(stream.schema, small_config(lam=1.0))
        with pytest.raises(NoTeacher):
            trainer.incremental_update(stream.periods[0])

    def test_progressive_eval_adds_pre_update_reports(self):
        stream = small_stream()
        reports, _ = run_protocol(stream, small_config(progressive_eval=True))
        evals = [r.period for r in reports if r.phase == "eval"]
        assert evals == [3, 4, 5]

    def test_mp_only_uses_teacher(self):
        stream = small_stream()
        reports, _ = run_protocol(stream, small_config(mode=MP_ONLY, lam=1.0))
        train_reports = [r for r in reports if r.phase == "train"]
        # anchoring loss is recorded for incremental periods (not warm-up)
        assert train_reports[-1].mean_l_prior >= 0.0

    def test_deterministic_given_seed(self):
        stream = small_stream()
        r1, t1 = run_protocol(small_stream(), small_config())
        r2, t2 = run_protocol(small_stream(), small_config())
        assert r1[-1].split("ALL").auc == r2[-1].split("ALL").auc
        for a, b in zip(t1.model.param_slots(), t2.model.param_slots()):
            np.testing.assert_array_equal(a.values, b.values)


class TestEvaluatePeriod:
    def test_splits_present_with_item_counts(self):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        rep = evaluate_period(trainer, stream.periods[-1],
                              trainer.item_counts, head_fraction=0.2)
        names = {s.split for s in rep.splits}
        assert "ALL" in names
        assert names <= {"ALL", "SHORT_HOT", "LONG_TAIL"}
        assert rep.split("ALL").n == stream.periods[-1].size

    def test_unknown_split_raises(self):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        rep = evaluate_period(trainer, stream.periods[-1],
                              trainer.item_counts, head_fraction=0.2)
        with pytest.raises(KeyError):
            rep.split("NOPE")


class TestCheckpoint:
    def test_round_trip_restores_everything(self, tmp_path):
        stream = small_stream()
        cfg = small_config()
        reports, trainer = run_protocol(stream, cfg)
        path = tmp_path / "t.ckpt"
        save_checkpoint(trainer, path)
        back = load_checkpoint(path, stream.schema)
        assert back.trained_through == trainer.trained_through
        assert back.config == cfg
        assert back.item_counts == trainer.item_counts
        for a, b in zip(trainer.model.param_slots(), back.model.param_slots()):
            np.testing.assert_array_equal(a.values, b.values)
        for tag in ("adam", "phi_adam"):
            sa, sb = getattr(trainer, tag), getattr(back, tag)
            assert set(sa.m) == set(sb.m)
            for sid in sa.m:
                np.testing.assert_array_equal(sa.m[sid], sb.m[sid])
                np.testing.assert_array_equal(sa.v[sid], sb.v[sid])
                np.testing.assert_array_equal(np.asarray(sa.steps[sid]),
                                              np.asarray(sb.steps[sid]))
        assert back.rng.bit_generator.state == trainer.rng.bit_generator.state

    def test_schema_digest_checked(self, tmp_path):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        path = tmp_path / "t.ckpt"
        save_checkpoint(trainer, path)
        other = synth_drift(SynthConfig(num_fields=3, vocab=8, num_periods=5,
                                        instances_per_period=10))[0]
        with pytest.raises(SchemaDigestMismatch):
            load_checkpoint(path, other.schema)

    def test_corrupt_file_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a checkpoint\n")
        stream = small_stream()
        with pytest.raises(CorruptFile):
            load_checkpoint(p, stream.schema)

    def test_version_mismatch_rejected(self, tmp_path):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        path = tmp_path / "t.ckpt"
        save_checkpoint(trainer, path)
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b" v1 ", b" v9 ", 1))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path, stream.schema)

    def test_truncated_file_rejected(self, tmp_path):
        stream = small_stream()
        _, trainer = run_protocol(stream, small_config())
        path = tmp_path / "t.ckpt"
        save_checkpoint(trainer, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CorruptFile):
            load_checkpoint(path, stream.schema)

    def test_periodic_checkpoints_written(self, tmp_path):
        stream = small_stream()
        cfg = small_config(checkpoint_dir=str(tmp_path / "ck"))
        run_protocol(stream, cfg)
        names = sorted(p.name for p in (tmp_path / "ck").iterdir())
        assert names == ["period_002.ckpt", "period_003.ckpt",
                         "period_004.ckpt"]


class TestResume:
    def test_resume_matches_uninterrupted(self, tmp_path):
        stream = small_stream()
        cfg = small_config(checkpoint_dir=str(tmp_path / "ck"))
        reports_full, trainer_full = run_protocol(small_stream(), small_config())

        run_protocol(stream, cfg)
        mid = load_checkpoint(tmp_path / "ck" / "period_003.ckpt",
                              stream.schema)
        reports_res, trainer_res = run_protocol(small_stream(),
                                                mid.config, trainer=mid)
        assert reports_res[-1].phase == "eval"
        assert reports_res[-1].split("ALL").auc == \
            reports_full[-1].split("ALL").auc
        for a, b in zip(trainer_full.model.param_slots(),
                        trainer_res.model.param_slots()):
            np.testing.assert_array_equal(a.values, b.values)
