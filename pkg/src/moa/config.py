"""Flat ``key = value`` run configuration files.

Example::

    # tiny synthetic run
    model.preset = moa-t-cifar      # optional base; explicit keys override it
    model.input_size = 16
    model.depths = 1, 1
    moa.reduction = 4
    train.epochs = 20
    data.dataset = synthetic
    output.dir = runs/tiny

Blank lines and ``#`` comments are ignored.  Lists are comma separated,
booleans are ``true``/``false``.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, get_type_hints

from .errors import ConfigError
from .model import ModelConfig, MoaConfig, preset
from .training import Recipe


@dataclass
class DataSpec:
    dataset: str = "synthetic"  # synthetic | cifar10 | cifar100
    dir: Optional[str] = None
    n_per_class: int = 16
    seed: int = 0
    noise: float = 0.3
    split: str = "test"  # split used by eval


@dataclass
class RunConfig:
    model: ModelConfig
    recipe: Recipe = field(default_factory=Recipe)
    data: DataSpec = field(default_factory=DataSpec)
    out_dir: Optional[str] = None


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"moa"}
_MOA_FIELDS = {f.name for f in dataclasses.fields(MoaConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(Recipe)}
_DATA_FIELDS = {f.name for f in dataclasses.fields(DataSpec)}

IMAGENET_LR = 0.001

_LIST_FIELDS = {"depths", "num_heads", "hidden_dims"}


def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, typ):
    name = key.split(".")[-1]
    try:
        if name in _LIST_FIELDS:
            return [int(v) for v in value.split(",") if v.strip()]
        if value.lower() in ("none", "null", ""):
            return None
        if typ is bool or "bool" in str(typ):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if "int" in str(typ) and "float" not in str(typ):
            return int(value)
        if "float" in str(typ):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None


def build_run_config(entries: Dict[str, str], preset_name: Optional[str] = None) -> RunConfig:
    entries = dict(entries)
    base_name = preset_name or entries.pop("model.preset", None)
    entries.pop("model.preset", None)
    model_kw: Dict[str, object] = {}
    moa_kw: Dict[str, object] = {}
    train_kw: Dict[str, object] = {}
    data_kw: Dict[str, object] = {}
    out_dir = None
    hints = {
        "model": get_type_hints(ModelConfig), "moa": get_type_hints(MoaConfig),
        "train": get_type_hints(Recipe), "data": get_type_hints(DataSpec),
    }
    tables = {"model": (_MODEL_FIELDS, model_kw), "moa": (_MOA_FIELDS, moa_kw),
              "train": (_TRAIN_FIELDS, train_kw), "data": (_DATA_FIELDS, data_kw)}
    for key, value in entries.items():
        if key == "output.dir":
            out_dir = value
            continue
        section, _, name = key.partition(".")
        if section not in tables or name not in tables[section][0]:
            raise ConfigError(f"unknown config key {key!r}")
        tables[section][1][name] = _convert(key, value, hints[section][name])

    if base_name is not None:
        try:
            model = preset(base_name)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        model = model.replace(moa=moa_kw, **model_kw)
    else:
        missing = {"input_size", "window_size", "patch_size", "depths", "num_heads",
                   "hidden_dims", "num_classes"} - model_kw.keys()
        if missing:
            raise ConfigError(f"model needs model.preset or explicit keys; missing {sorted(missing)}")
        model = ModelConfig(moa=MoaConfig(**moa_kw), **model_kw)
    data = DataSpec(**data_kw)
    if data.dataset not in ("synthetic", "cifar10", "cifar100"):
        raise ConfigError(f"data.dataset must be synthetic, cifar10 or cifar100, got {data.dataset!r}")
    if data.split not in ("train", "test"):
        raise ConfigError(f"data.split must be train or test, got {data.split!r}")
    if base_name is not None and base_name.endswith("-in") and "lr" not in train_kw:
        # no published ImageNet peak rate; reduced default for the larger presets
        train_kw["lr"] = IMAGENET_LR
    recipe = Recipe(**train_kw)
    if recipe.epochs < 1 or recipe.batch_size < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    if not 0 <= recipe.warmup_epochs < recipe.epochs:
        raise ConfigError("train.warmup_epochs must satisfy 0 <= warmup < epochs")
    return RunConfig(model=model, recipe=recipe, data=data, out_dir=out_dir)


def load_run_config(path, preset_name: Optional[str] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return build_run_config(parse_config_text(text), preset_name)


def resolve_data_dir(spec: DataSpec) -> Optional[str]:
    return spec.dir or os.environ.get("MOA_DATA_DIR")
