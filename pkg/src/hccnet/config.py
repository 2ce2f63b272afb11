"""Run configuration: built-in defaults overlaid by a JSON file, then by command-line flags."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

from .backbone import VARIANTS
from .volumes import SyntheticConfig


class ConfigError(ValueError):
    pass


_OPT_COMMON = {"min_lr": 1e-6, "accum_steps": 1}

DEFAULTS: dict[str, Any] = {
    "variant": "P",
    "channels": None,
    "seed": 0,
    "seeds": list(range(10)),
    "out": "runs",
    "synthetic": asdict(SyntheticConfig()),
    "split": {"dev_fraction": 0.75},
    "augment": {
        "p_flip": 0.5,
        "p_rot90": 0.5,
        "p_intensity": 1.0,
        "scale_range": [0.9, 1.1],
        "shift_range": [-0.1, 0.1],
    },
    "backbone_pretrain": {
        **_OPT_COMMON,
        "steps": 32000,
        "warmup": 1600,
        "batch_size": 128,
        "base_lr": 4e-4,
        "weight_decay": 5e-2,
        "weight_decay_end": 5e-1,
        "clip": 1.0,
        "teacher_temp": 0.04,
        "student_temp": 0.1,
        "out_dim": 1024,
        "hidden_dim": 2048,
        "bottleneck_dim": 256,
        "ema_momentum": 0.9995,
        "center_momentum": 0.9,
        "global_crop": 72,
        "local_crop": 48,
    },
    "encoder_pretrain": {
        **_OPT_COMMON,
        "steps": 8000,
        "warmup": None,  # 400 for F/P, 800 for N/T
        "batch_size": 32,
        "base_lr": 1e-4,
        "weight_decay": 5e-2,
        "weight_decay_end": 5e-1,
        "clip": 1.0,
        "dropout": 0.2,
        "max_len": 8,
        "crop": 72,
        "shuffle_prob": 2.0 / 3.0,
    },
    "finetune": {
        **_OPT_COMMON,
        "steps": 400,
        "warmup": 20,
        "batch_size": 32,
        "base_lr": 1e-4,
        "weight_decay": 1e-5,
        "clip": 3.0,
        "label_smoothing": 0.1,
        "dropout": 0.2,
        "pos_weight": "auto",
        "max_len": 8,
        "crop": 72,
    },
    "baseline": {
        **_OPT_COMMON,
        "steps": 400,
        "warmup": 40,
        "batch_size": 32,
        "base_lr": 1e-4,
        "weight_decay": 1e-5,
        "clip": 3.0,
        "label_smoothing": 0.1,
        "dropout": 0.2,
        "pos_weight": "auto",
        "max_len": 8,
        "crop": 72,
    },
    "evaluate": {
        "crop": 72,
        "threshold": 0.5,
        "n_bins": 10,
        "max_len": 8,
        "batch_size": 8,
        "gain_normalization": "total",  # or "running_mean"
    },
}

STAGE_SECTIONS = ("backbone_pretrain", "encoder_pretrain", "finetune", "baseline")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def encoder_warmup(variant: str) -> int:
    return 400 if variant in ("F", "P") else 800


def resolve_config(
    path: Optional[str] = None,
    overrides: Optional[dict] = None,
    stage: Optional[str] = None,
    steps: Optional[int] = None,
    batch_size: Optional[int] = None,
) -> dict:
    """Defaults <- config file <- explicit overrides; ``steps``/``batch_size`` apply to ``stage``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = deep_merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        cfg = deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    if cfg["encoder_pretrain"].get("warmup") is None:
        cfg["encoder_pretrain"]["warmup"] = encoder_warmup(cfg["variant"])
    sections = [stage] if stage in STAGE_SECTIONS else []
    if stage == "finetune-all":
        sections = ["finetune", "baseline"]
    for sec in sections:
        s = cfg[sec]
        if steps is not None:
            # keep the warmup fraction when shortening a run
            s["warmup"] = int(round(s["warmup"] * steps / s["steps"]))
            s["steps"] = int(steps)
        if batch_size is not None:
            s["batch_size"] = int(batch_size)
    if stage == "evaluate" and batch_size is not None:
        cfg["evaluate"]["batch_size"] = int(batch_size)
    validate(cfg)
    return cfg


def _unknown_keys(cfg: dict, ref: dict, prefix: str = "") -> list[str]:
    bad = []
    for k, v in cfg.items():
        if k not in ref:
            bad.append(prefix + k)
        elif isinstance(ref[k], dict) and isinstance(v, dict):
            bad += _unknown_keys(v, ref[k], f"{prefix}{k}.")
    return bad


def validate(cfg: dict) -> None:
    unknown = _unknown_keys(cfg, DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for sec in STAGE_SECTIONS:
        s = cfg[sec]
        if s["steps"] < 1:
            raise ConfigError(f"{sec}.steps must be >= 1")
        if not 0 <= s["warmup"] <= s["steps"]:
            raise ConfigError(f"{sec}.warmup must lie in [0, steps]")
        if s["batch_size"] < 1 or s["batch_size"] % s.get("accum_steps", 1):
            raise ConfigError(f"{sec}.batch_size must be a positive multiple of accum_steps")
        if s["clip"] <= 0:
            raise ConfigError(f"{sec}.clip must be positive")
    for sec in ("finetune", "baseline"):
        if not 0 <= cfg[sec]["label_smoothing"] < 0.5:
            raise ConfigError(f"{sec}.label_smoothing must lie in [0, 0.5)")
    if not 0 < cfg["split"]["dev_fraction"] < 1:
        raise ConfigError("split.dev_fraction must lie in (0, 1)")
    try:
        synthetic_config(cfg).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["evaluate"]["gain_normalization"] not in ("total", "running_mean"):
        raise ConfigError("evaluate.gain_normalization must be 'total' or 'running_mean'")
    if not cfg["seeds"]:
        raise ConfigError("seeds list is empty")


def synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(**cfg["synthetic"])
