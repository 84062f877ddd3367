"""YAML training configs with dotted-path overrides.

A config file mirrors :class:`~layersplit.train.TrainConfig`; ``weights`` is a
nested mapping with ``lambda1`` and ``lambda2``. Missing weights and epochs
default per ``model_tag``. All field problems are reported together.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from ._validation import ConfigError
from .losses import DEFAULT_WEIGHTS, LossWeights
from .train import DEFAULT_EPOCHS, TrainConfig

FIELDS = {f for f in TrainConfig.__dataclass_fields__}
INT_FIELDS = {"batch_size", "epochs", "n_inputs", "seed", "steps_per_epoch", "patch_size"}


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r}: empty key")
    return key, yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(data: dict, overrides) -> dict:
    data = dict(data)
    for text in overrides or ():
        key, value = parse_override(text) if isinstance(text, str) else text
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            node[part] = dict(child) if isinstance(child, dict) else {}
            node = node[part]
        node[parts[-1]] = value
    return data


def _number(v):
    # PyYAML follows YAML 1.1 and reads "1e-3" as a string
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def resolve_config(data: dict) -> TrainConfig:
    """Type-check a raw mapping and fill defaults; raises :class:`ConfigError`."""
    data = dict(data or {})
    errors = []
    unknown = sorted(set(data) - FIELDS)
    errors += [f"{k}: unknown field" for k in unknown]
    for k in unknown:
        data.pop(k)
    for k in INT_FIELDS & set(data):
        v = data[k]
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            errors.append(f"{k}: expected an integer, got {v!r}")
            data.pop(k)
    if "learning_rate" in data:
        v = _number(data["learning_rate"])
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append(f"learning_rate: expected a number, got {v!r}")
            data.pop("learning_rate")
        else:
            data["learning_rate"] = float(v)
    tag = data.get("model_tag", "subtract_clip")
    weights = data.pop("weights", None)
    if weights is not None and not isinstance(weights, dict):
        errors.append(f"weights: expected a mapping, got {weights!r}")
        weights = None
    defaults = DEFAULT_WEIGHTS.get(tag, (15.0, 20.0))
    merged = {"lambda1": defaults[0], "lambda2": defaults[1], **(weights or {})}
    merged = {k: _number(v) for k, v in merged.items()}
    extra = sorted(set(merged) - {"lambda1", "lambda2"})
    errors += [f"weights.{k}: unknown field" for k in extra]
    try:
        data["weights"] = LossWeights(float(merged["lambda1"]), float(merged["lambda2"]))
    except (TypeError, ValueError) as exc:
        errors.append(f"weights: {exc}")
    if data.get("epochs") is None:
        data["epochs"] = DEFAULT_EPOCHS.get(tag)
    ablation = data.get("ablation", [])
    if isinstance(ablation, str):
        ablation = [ablation]
    if not isinstance(ablation, (list, tuple, set, frozenset)):
        errors.append(f"ablation: expected a list of flags, got {ablation!r}")
        ablation = []
    data["ablation"] = frozenset(ablation)
    cfg = None
    try:
        cfg = TrainConfig(**data)
        errors += cfg.errors()
    except TypeError as exc:
        errors.append(str(exc))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path=None, overrides=()) -> TrainConfig:
    """Load ``path`` (YAML; may be empty), apply overrides, resolve."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config: top level of {path} must be a mapping")
    return resolve_config(apply_overrides(data, overrides))


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
