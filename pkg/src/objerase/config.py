"""Namespaced run configuration: defaults < config file < flag overrides.

Keys live in the dit.*, teacher.*, train.*, kgp.*, and eval.* namespaces;
unknown keys are rejected so typos cannot silently fall back to defaults.
Every run logs its fully resolved configuration.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Optional

from .denoiser import DiTConfig, ModelConfig
from .errors import ValidationError
from .training import TrainConfig

log = logging.getLogger(__name__)

# key -> (type, default); bool values in files are real JSON bools, on the
# command line they parse from "true"/"false"/"1"/"0"
DEFAULTS: dict[str, tuple[type, Any]] = {
    "dit.depth": (int, 4),
    "dit.hidden": (int, 96),
    "dit.heads": (int, 4),
    "dit.patch": (int, 8),
    "dit.align_block": (int, 0),  # 0 = mid-depth
    "dit.cond_dim": (int, 64),
    "dit.cond_patch": (int, 8),
    "dit.cond_seed": (int, 101),
    "teacher.kind": (str, "frozen_random"),
    "teacher.dim": (int, 64),
    "teacher.patch": (int, 8),
    "teacher.seed": (int, 7),
    "teacher.dump_dir": (str, None),
    "train.lambda": (float, 0.1),
    "train.delta": (float, 0.1),
    "train.steps": (int, 500),
    "train.batch": (int, 2),
    "train.lr": (float, 2e-3),
    "train.warmup": (int, 50),
    "train.ema": (float, 0.999),
    "train.kgp_augment": (bool, True),
    "train.kgp_prob": (float, 0.5),
    "train.stride_min": (int, 2),
    "train.stride_max": (int, 10),
    "train.seed": (int, 0),
    "train.log_every": (int, 1),
    "train.ckpt_every": (int, 200),
    "kgp.window": (int, 81),
    "kgp.sample_steps": (int, 20),
    "eval.delta": (float, 0.1),
}


def _coerce(key: str, value):
    typ, _ = DEFAULTS[key]
    if value is None:
        return None
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"cannot parse boolean for {key}: {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad value for {key}: {value!r}") from exc


def resolve(
    config_file: Optional[Path | str] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """Merge defaults, an optional JSON config file, and explicit overrides."""
    cfg = {k: default for k, (_, default) in DEFAULTS.items()}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise ValidationError("config file must be a JSON object of namespaced keys")
        for k, v in data.items():
            if k not in DEFAULTS:
                raise ValidationError(f"unknown config key in {path}: {k!r}")
            cfg[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ValidationError(f"unknown config key: {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


def log_resolved(cfg: dict[str, Any]) -> None:
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))


def model_config(cfg: dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        dit=DiTConfig(
            depth=cfg["dit.depth"],
            hidden=cfg["dit.hidden"],
            heads=cfg["dit.heads"],
            patch=cfg["dit.patch"],
            align_block=cfg["dit.align_block"],
        ),
        cond_dim=cfg["dit.cond_dim"],
        cond_patch=cfg["dit.cond_patch"],
        cond_seed=cfg["dit.cond_seed"],
        teacher_kind=cfg["teacher.kind"],
        teacher_dim=cfg["teacher.dim"],
        teacher_patch=cfg["teacher.patch"],
        teacher_seed=cfg["teacher.seed"],
        teacher_dump_dir=cfg["teacher.dump_dir"],
    )


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        lambda_=cfg["train.lambda"],
        delta=cfg["train.delta"],
        steps=cfg["train.steps"],
        batch=cfg["train.batch"],
        lr=cfg["train.lr"],
        warmup=cfg["train.warmup"],
        ema=cfg["train.ema"],
        kgp_augment=cfg["train.kgp_augment"],
        kgp_prob=cfg["train.kgp_prob"],
        stride_range=(cfg["train.stride_min"], cfg["train.stride_max"]),
        seed=cfg["train.seed"],
        log_every=cfg["train.log_every"],
        ckpt_every=cfg["train.ckpt_every"],
    )
