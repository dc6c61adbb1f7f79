"""Plain-text key=value configuration with command-line overrides.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Values are coerced to the target TrainConfig field types, so
``--set lambda_adv=0`` and ``--set part_prior=false`` do what they look
like.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .trainer import TrainConfig


def _coerce(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def parse_config_file(path) -> dict:
    """Raw key -> string mapping from a key=value file."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_train_config(config_path=None, overrides=None) -> TrainConfig:
    """TrainConfig from an optional file plus --set key=value overrides."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    type_map = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}
    raw = {}
    if config_path is not None:
        raw.update(parse_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r} (valid: {sorted(known)})")
        kwargs[key] = _coerce(value, type_map[key])
    return TrainConfig(**kwargs)
