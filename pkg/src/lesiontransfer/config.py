"""Flat ``key = value`` run configuration.

Every key has a typed default; files may override any subset. Unknown keys
are rejected so typos fail loudly. ``Config.resolved()`` renders the full
key list, which each run writes to ``resolved-config.txt``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

PACKAGED_DIR = os.path.join(os.path.dirname(__file__), "configs")

# key: (default, help)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "base seed for parameters, batching and critic mixing"),
    "epochs": (10, "total training epochs including warm-up"),
    "warmup_epochs": (3, "epochs before pseudo labels and the centroid loss switch on"),
    "batch_size": (4, "images per domain per step"),
    "lr": (1e-3, "initial Adam learning rate"),
    "critic.lr": (1e-3, "initial Adam learning rate of the critic"),
    "lr_decay_rate": (0.7, "multiplicative step decay"),
    "lr_decay_step": (950, "optimiser steps between decays"),
    "clip_norm": (5.0, "global gradient-norm clip; 0 disables"),
    "eta": (0.3, "weight of the adversarial term"),
    "mu": (10.0, "weight of the centroid consistence term"),
    "alpha": (1.0, "L1 weight inside the consistence term"),
    "gamma": (0.7, "centroid memory decay"),
    "xi": (10.0, "gradient-penalty weight"),
    "adapt.al": (True, "adversarial alignment with the critic"),
    "adapt.pl": (True, "pseudo-label segmentation loss on the target"),
    "adapt.srt": (True, "centroid consistence loss"),
    "adapt.qt": (True, "transferability gate on features"),
    "adapt.sp": (True, "superpixel voting refinement of pseudo labels"),
    "adapt.target_cls": (True, "target image-tag classification (off for source-only runs)"),
    "pl.class_balanced": (True, "per-class thresholds (false pools all classes)"),
    "pl.weighted": (True, "weight pixel losses by their max probability"),
    "gp.mode": ("aswritten", "aswritten | interpolated"),
    "gate.detach": (True, "treat W as a constant in the generator step"),
    "gate.granularity": ("map", "map | image"),
    "critic.input": ("features", "features | softmax"),
    "attention.normalize_axis": ("first", "first | second"),
    "refine.enabled": (True, "classification refinement of pixel logits"),
    "refine.inplace": (False, "in-place (sequential) superpixel voting"),
    "centroid.normalize": ("total", "total | per_class"),
    "centroid.absent": ("skip", "skip | zero"),
    "centroid.features": ("unit", "raw | unit (per-pixel L2-normalised before pooling)"),
    "sp.k": (64, "SLIC target superpixel count"),
    "sp.compactness": (10.0, "SLIC compactness"),
    "sp.iters": (10, "SLIC iterations"),
    "dtype": ("float32", "training precision"),
    "checkpoint_every": (0, "save a checkpoint every N steps; 0 only at the end"),
    "synth.preset": ("default", "default | shapes"),
    "synth.n_source_train": (300, "source training images"),
    "synth.n_target_train": (150, "target training images"),
    "synth.n_source_test": (100, "source test images"),
    "synth.n_target_test": (100, "target test images"),
}

CHOICES = {
    "gp.mode": ("aswritten", "interpolated"),
    "gate.granularity": ("map", "image"),
    "critic.input": ("features", "softmax"),
    "attention.normalize_axis": ("first", "second"),
    "centroid.normalize": ("total", "per_class"),
    "centroid.absent": ("skip", "zero"),
    "centroid.features": ("raw", "unit"),
    "dtype": ("float32", "float64"),
    "synth.preset": ("default", "shapes"),
}


class ConfigError(ValueError):
    pass


def _parse(key: str, text: str):
    default = DEFAULTS[key][0]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return text


@dataclass
class Config:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **kw) -> "Config":
        out = dict(self.values)
        for k, v in kw.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = v
        cfg = Config(out)
        cfg.validate()
        return cfg

    def update(self, mapping: dict) -> "Config":
        out = dict(self.values)
        for key, v in mapping.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = v
        cfg = Config(out)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        for key, allowed in CHOICES.items():
            if v[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {v[key]!r}")
        for key in ("eta", "mu", "alpha", "xi"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0.0 < v["gamma"] < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if v["batch_size"] < 1 or v["epochs"] < 1 or v["warmup_epochs"] < 0:
            raise ConfigError("batch_size and epochs must be >= 1, warmup_epochs >= 0")
        if v["critic.input"] == "softmax" and v["adapt.qt"]:
            raise ConfigError("critic.input=softmax cannot drive the feature gate (adapt.qt)")

    def resolved(self) -> str:
        lines = []
        for key in DEFAULTS:
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved().encode()).hexdigest()[:16]


def default_config() -> Config:
    return Config({k: d for k, (d, _) in DEFAULTS.items()})


def parse_text(text: str, base: Config | None = None) -> Config:
    base = base or default_config()
    found = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        found[key] = _parse(key, val)
    return base.update(found)


def packaged_names() -> list[str]:
    return sorted(f[:-4] for f in os.listdir(PACKAGED_DIR) if f.endswith(".txt"))


def resolve_path(path) -> str:
    """A file path, or the bare name of a config shipped with the package."""
    if os.path.exists(path):
        return str(path)
    cand = os.path.join(PACKAGED_DIR, f"{path}.txt")
    if os.path.exists(cand):
        return cand
    raise ConfigError(f"no config file {path!r} (packaged: {', '.join(packaged_names())})")


def load(path, base: Config | None = None) -> Config:
    with open(resolve_path(path)) as fh:
        return parse_text(fh.read(), base)


def _fmt(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)


def documentation() -> str:
    """Every key with its default and a one-line note, itself a valid config file."""
    return "".join(f"{k} = {_fmt(d)}    # {h}\n" for k, (d, h) in DEFAULTS.items())
