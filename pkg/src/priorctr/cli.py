"""Command-line entry point: train, eval, synth, kl-diag, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys

from . import config as cfgmod
from .embedding import Schema
from .gradcheck import run_full_check
from .harness import (ConfigError, PeriodReport, RunConfig, Trainer,
                      evaluate_period, load_checkpoint, run_protocol,
                      save_checkpoint)
from .metrics import kl_report
from .stream import ingest_csv, synth_drift, synth_schema, write_synth_csv


def _load_values(args) -> dict[str, str]:
    values = cfgmod.parse_config_file(args.config) if args.config else {}
    return cfgmod.apply_overrides(values, getattr(args, "set", None))


def _resolve_stream(values, args, run_config):
    """Build the input stream from either a data CSV or the synthetic generator."""
    inputs = []
    if "data.path" in values:
        schema_path = values.get("data.schema")
        if not schema_path:
            raise ConfigError("data.path requires data.schema")
        with open(schema_path) as fh:
            schema = Schema.from_text(fh.read())
        stream = ingest_csv(values["data.path"], schema,
                            num_periods=run_config.num_periods,
                            label_col=values.get("data.label_col", "label"),
                            period_col=values.get("data.period_col", "period"))
        inputs = [values["data.path"], schema_path]
        if stream.skipped:
            print(f"skipped {stream.skipped} malformed rows", file=sys.stderr)
    elif cfgmod.has_synth_section(values):
        synth_cfg = cfgmod.build_synth_config(values)
        stream, _ = synth_drift(synth_cfg)
    else:
        raise ConfigError("config needs either data.path or a synth.* section")
    return stream, inputs


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()[:16]


def _write_metrics_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "phase", "split", "auc", "logloss",
                    "l_likelihood", "l_prior", "n_instances"])
        for rep in reports:
            if rep.phase == "train":
                w.writerow([rep.period, "train", "", "", "",
                            f"{rep.mean_l_likelihood:.6f}",
                            f"{rep.mean_l_prior:.6f}", ""])
            else:
                for s in rep.splits:
                    a = "" if math.isnan(s.auc) else f"{s.auc:.6f}"
                    w.writerow([rep.period, "eval", s.split, a,
                                f"{s.logloss:.6f}", "", "", s.n])


def _print_summary(reports):
    for rep in reports:
        if rep.phase == "train":
            print(f"period {rep.period} [train] "
                  f"l_likelihood={rep.mean_l_likelihood:.4f} "
                  f"l_prior={rep.mean_l_prior:.4f} "
                  f"fp_loss={rep.mean_fp_loss:.4f}")
        else:
            parts = " ".join(f"{s.split}: auc={s.auc:.4f} logloss={s.logloss:.4f}"
                             for s in rep.splits)
            print(f"period {rep.period} [eval]  {parts}")


def cmd_train(args) -> int:
    values = _load_values(args)
    run_config = cfgmod.build_run_config(values, seed=args.seed)
    stream, inputs = _resolve_stream(values, args, run_config)
    os.makedirs(args.out, exist_ok=True)
    reports, trainer = run_protocol(stream, run_config)
    _write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    save_checkpoint(trainer, os.path.join(args.out, "final.ckpt"))
    manifest = {
        "config": {k: v for k, v in sorted(values.items())},
        "seed": run_config.seed,
        "schema_digest": stream.schema.digest(),
        "input_digest": _digest_files(inputs) if inputs else "synthetic",
    }
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_summary(reports)
    return 0


def cmd_eval(args) -> int:
    with open(args.schema) as fh:
        schema = Schema.from_text(fh.read())
    trainer = load_checkpoint(args.checkpoint, schema)
    stream = ingest_csv(args.data, schema)
    reports = []
    for period in stream.periods:
        if period.size == 0:
            continue
        reports.append(evaluate_period(trainer, period, trainer.item_counts,
                                       trainer.config.head_fraction))
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    _write_metrics_csv(os.path.join(out, "metrics.csv"), reports)
    _print_summary(reports)
    return 0


def cmd_synth(args) -> int:
    values = _load_values(args)
    synth_cfg = cfgmod.build_synth_config(values, seed=args.seed)
    stream, truth = synth_drift(synth_cfg)
    os.makedirs(args.out, exist_ok=True)
    write_synth_csv(stream, truth,
                    os.path.join(args.out, "data.csv"),
                    os.path.join(args.out, "truth.csv"))
    with open(os.path.join(args.out, "schema.txt"), "w") as fh:
        fh.write(synth_schema(synth_cfg).to_text())
    total = sum(p.size for p in stream.periods)
    print(f"wrote {total} instances over {stream.num_periods} periods to {args.out}")
    return 0


def cmd_kl_diag(args) -> int:
    values = _load_values(args)
    run_config = cfgmod.build_run_config(values)
    stream, _ = _resolve_stream(values, args, run_config)
    cells = kl_report(stream)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "kl.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "key", "granularity", "kl", "impressions", "sparse"])
        for c in cells:
            w.writerow([c.period, c.key, c.granularity, f"{c.kl:.6f}",
                        c.impressions, int(c.sparse)])
    from .metrics import mean_kl
    print(f"mean feature KL:        {mean_kl(cells, 'FEATURE'):.5f}")
    print(f"mean instance-group KL: {mean_kl(cells, 'INSTANCE_GROUP'):.5f}")
    return 0


def cmd_grad_check(args) -> int:
    lines, ok = run_full_check(tolerance=args.tolerance, seed=args.seed or 0,
                               corrupt_slot=args.corrupt_slot)
    for line in lines:
        print(line)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorctr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="key-value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="run_out", help="output directory")

    p = sub.add_parser("train", help="run the incremental-update protocol")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic drift stream")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("kl-diag", help="CTR-stability KL report")
    common(p)
    p.set_defaults(func=cmd_kl_diag)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-slot", default=None,
                   help="debug: double one slot's gradient to force a failure")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors surface as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
