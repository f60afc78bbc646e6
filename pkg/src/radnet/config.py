"""Flat dotted-key run configuration read from a JSON file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import RadnetConfig
from .phantom import PhantomSpec
from .preprocess import BRAIN_WINDOW_CENTER, BRAIN_WINDOW_WIDTH, FOV_MM, TARGET_SPACING_MM
from .trainer import TrainConfig

_model, _train, _phantom = RadnetConfig(), TrainConfig(), PhantomSpec()

DEFAULTS: dict[str, Any] = {
    **{f"model.{k}": v for k, v in _model.to_dict().items() if k != "num_classes"},
    **{f"train.{k}": v for k, v in _train.to_dict().items()},
    "train.val_data": None,
    "preprocess.window_center": BRAIN_WINDOW_CENTER,
    "preprocess.window_width": BRAIN_WINDOW_WIDTH,
    "preprocess.target_spacing_mm": TARGET_SPACING_MM,
    "preprocess.fov_mm": FOV_MM,
    "eval.min_run": 3,
    "eval.threshold": 0.5,
    **{f"phantom.{k}": (list(v) if isinstance(v, tuple) else v) for k, v in vars(_phantom).items()},
}


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults updated by the file, then by ``overrides``; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    given: dict[str, Any] = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: top level must be an object of dotted keys")
    for source in (given, overrides or {}):
        unknown = sorted(set(source) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(source)
    return cfg


def _section(cfg: dict[str, Any], prefix: str, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".") and k[n:] not in skip}


def model_config(cfg: dict[str, Any]) -> RadnetConfig:
    try:
        return RadnetConfig(**_section(cfg, "model"))
    except TypeError as exc:
        raise ConfigError(f"model config: {exc}") from None


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**_section(cfg, "train", skip=("val_data",)))
    except TypeError as exc:
        raise ConfigError(f"train config: {exc}") from None


def phantom_spec(cfg: dict[str, Any]) -> PhantomSpec:
    fields = _section(cfg, "phantom")
    for k in ("hemorrhage_hu", "blob_radius_px", "blob_extent"):
        fields[k] = tuple(fields[k])
    try:
        return PhantomSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"phantom config: {exc}") from None


def dump_config(cfg: dict[str, Any]) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2)
