"""Flat ``key = value`` experiment configs.

One pair per line, ``#`` starts a comment, dotted keys group related
settings (``data.source``, ``partition.alpha``).  Every key has a
documented default except the required ones below.

Defaults worth knowing: ``damping = 1.0``, ``local_steps = 1``,
``init_sigma = 0.1``, ``foof_mode = per_step``, ``l2 = 0.001``.
"""

from __future__ import annotations

import math
import os
from dataclasses import fields
from typing import Callable

from .errors import ConfigError, ConfigTypeError, MissingFile, MissingKey, UnknownKey
from .harness import ExperimentConfig, check_compatibility
from .methods import FOOF_MODES, METHODS

REQUIRED = ("method", "model", "data.source", "clients", "rounds", "lr")


def _int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigTypeError(f"{key}: expected integer, got {raw!r}") from None


def _float(key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigTypeError(f"{key}: expected number, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigTypeError(f"{key}: expected finite number, got {raw!r}")
    return v


def _bool(key, raw):
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigTypeError(f"{key}: expected boolean, got {raw!r}")


def _int_list(key, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigTypeError(f"{key}: expected comma-separated integers, got {raw!r}")
    return tuple(_int(key, p) for p in parts)


def _choice(*allowed) -> Callable:
    def conv(key, raw):
        if raw not in allowed:
            raise ConfigTypeError(f"{key}: expected one of {', '.join(allowed)}, got {raw!r}")
        return raw
    return conv


def _text(key, raw):
    return raw


# config key -> (ExperimentConfig field, converter)
KEYS: dict[str, tuple[str, Callable]] = {
    "method": ("method", _choice(*METHODS)),
    "model": ("model", _choice("logistic", "mlp")),
    "layer_dims": ("layer_dims", _int_list),
    "data.source": ("data_source", _text),
    "data.d": ("data_d", _int),
    "data.n": ("data_n", _int),
    "data.separation": ("data_separation", _float),
    "data.classes": ("data_classes", _int),
    "data.dim_override": ("data_dim_override", _int),
    "partition": ("partition", _choice("even", "dirichlet")),
    "partition.alpha": ("partition_alpha", _float),
    "clients": ("clients", _int),
    "rounds": ("rounds", _int),
    "local_steps": ("local_steps", _int),
    "local_epochs": ("local_epochs", _int),
    "batch_size": ("batch_size", _int),
    "lr": ("lr", _float),
    "l2": ("l2", _float),
    "damping": ("damping", _float),
    "foof_mode": ("foof_mode", _choice(*FOOF_MODES)),
    "init_sigma": ("init_sigma", _float),
    "seed": ("seed", _int),
    "seeds": ("seeds", _int_list),
    "out": ("out", _text),
    "record_timing": ("record_timing", _bool),
    "oracle_iterations": ("oracle_iterations", _int),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in KEYS.items()}

# (key, predicate, expected) checked after conversion
_RANGES = (
    ("clients", lambda v: v >= 1, "integer >= 1"),
    ("rounds", lambda v: v >= 0, "integer >= 0"),
    ("lr", lambda v: v > 0, "number > 0"),
    ("l2", lambda v: v >= 0, "number >= 0"),
    ("damping", lambda v: v >= 0, "number >= 0"),
    ("local_steps", lambda v: v >= 1, "integer >= 1"),
    ("local_epochs", lambda v: v >= 1, "integer >= 1"),
    ("batch_size", lambda v: v >= 1, "integer >= 1"),
    ("init_sigma", lambda v: v >= 0, "number >= 0"),
    ("partition.alpha", lambda v: v > 0, "number > 0"),
    ("data.d", lambda v: v >= 1, "integer >= 1"),
    ("data.n", lambda v: v >= 2, "integer >= 2"),
    ("data.classes", lambda v: v >= 2, "integer >= 2"),
    ("data.dim_override", lambda v: v >= 1, "integer >= 1"),
    ("oracle_iterations", lambda v: v >= 0, "integer >= 0"),
)


def parse_config(text: str, check_files: bool = True) -> ExperimentConfig:
    """Parse config text into a validated :class:`ExperimentConfig`."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in KEYS:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        raw[key] = value

    for key in REQUIRED:
        if key not in raw:
            raise MissingKey(f"missing required key {key!r}")

    values = {}
    for key, text_value in raw.items():
        field_name, conv = KEYS[key]
        values[key] = conv(key, text_value)
    for key, ok, expected in _RANGES:
        if key in values and not ok(values[key]):
            raise ConfigTypeError(f"{key}: expected {expected}, got {raw[key]!r}")

    check_compatibility(values["method"], values["model"])
    if values["model"] == "mlp":
        dims = values.get("layer_dims")
        if dims is None:
            raise MissingKey("missing required key 'layer_dims' for model = mlp")
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigTypeError("layer_dims: expected at least two positive integers")
    source = values["data.source"]
    if source != "synthetic" and check_files and not os.path.isfile(source):
        raise MissingFile(f"data.source: file {source!r} does not exist")

    return ExperimentConfig(**{KEYS[k][0]: v for k, v in values.items()})


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(cfg: ExperimentConfig) -> str:
    """Resolved config text; ``parse_config(render(cfg)) == cfg``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None or v == ():
            continue
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {_render_value(v)}")
    return "\n".join(lines) + "\n"


def sweep_seeds(cfg: ExperimentConfig) -> tuple[int, ...]:
    return tuple(cfg.seeds) if cfg.seeds else (cfg.seed,)
