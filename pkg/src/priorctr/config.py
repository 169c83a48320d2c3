"""Flat key-value run configuration files with dotted sections and overrides.

Every run setting is addressable both in the file and as a ``--set key=value``
override; overrides win.  Unknown keys are rejected.
"""
from __future__ import annotations

from .harness import MODES, PLAIN, FP_ONLY, ConfigError, RunConfig
from .stream import SynthConfig

RUN_KEYS = {
    "mode": str,
    "periods": int,
    "warmup": int,
    "batch_size": int,
    "epochs": int,
    "lambda": float,
    "bins": int,
    "dim": int,
    "interaction": str,
    "hidden": str,
    "adam_lr": float,
    "fp_lr": float,
    "fp_optimizer": str,
    "fp_adam_lr": float,
    "l2": float,
    "seed": int,
    "head_fraction": float,
    "fp_init_logit": float,
    "progressive": bool,
    "dtype": str,
}

DATA_KEYS = {
    "data.path": str,
    "data.schema": str,
    "data.label_col": str,
    "data.period_col": str,
}

SYNTH_KEYS = {
    "synth.fields": int,
    "synth.vocab": int,
    "synth.periods": int,
    "synth.per_period": int,
    "synth.seed": int,
    "synth.base_logit": float,
    "synth.contrib_scale": float,
    "synth.zipf": float,
    "synth.drift_period": int,
    "synth.drift_sharpness": float,
}

ALL_KEYS = {**RUN_KEYS, **DATA_KEYS, **SYNTH_KEYS}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            values[key] = val
    return values


def apply_overrides(values: dict[str, str], overrides) -> dict[str, str]:
    out = dict(values)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        out[key] = val
    return out


def _coerce(key: str, raw: str):
    typ = ALL_KEYS[key]
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def build_run_config(values: dict[str, str], seed: int | None = None) -> RunConfig:
    for key in values:
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    kw = {}
    rename = {"periods": "num_periods", "warmup": "warmup", "lambda": "lam",
              "bins": "num_bins", "progressive": "progressive_eval"}
    for key in RUN_KEYS:
        if key not in values:
            continue
        if key == "hidden":
            kw["hidden"] = tuple(int(h) for h in values[key].split(",") if h.strip())
            continue
        kw[rename.get(key, key)] = _coerce(key, values[key])
    if seed is not None:
        kw["seed"] = seed
    mode = kw.get("mode", RunConfig.mode)
    if "lam" in kw and kw["lam"] > 0 and mode in (PLAIN, FP_ONLY):
        raise ConfigError(f"lambda is meaningless in mode {mode}")
    try:
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_synth_config(values: dict[str, str], seed: int | None = None) -> SynthConfig:
    kw = {}
    rename = {"synth.fields": "num_fields", "synth.vocab": "vocab",
              "synth.periods": "num_periods",
              "synth.per_period": "instances_per_period",
              "synth.seed": "seed", "synth.base_logit": "base_logit",
              "synth.contrib_scale": "contrib_scale",
              "synth.zipf": "zipf_exponent",
              "synth.drift_period": "drift_period",
              "synth.drift_sharpness": "drift_sharpness"}
    for key, name in rename.items():
        if key in values:
            kw[name] = _coerce(key, values[key])
    if seed is not None:
        kw["seed"] = seed
    try:
        return SynthConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def has_synth_section(values: dict[str, str]) -> bool:
    return any(k.startswith("synth.") for k in values)
