"""TOML run configuration with flag > environment > file > default precedence.

Schema (every key optional)::

    seed = 0

    [backend]
    kind = "mock"              # or "pretrained"
    path = "/path/to/clip"     # pretrained weights; else $CUELIGHT_CLIP_WEIGHTS

    [data]
    images_dir = "data/images"
    annotations = "data/annotations.json"
    min_confidence = 0.3       # keep auto-annotations strictly above this
    patch_size = 224
    membership = "center"      # or "overlap"
    sources = [{name = "a", images_dir = "...", annotations = "..."}]

    [prior]    # prompt-pair learning
    [heads]    # projection-head fine-tuning
    [train]    # enhancer training, plus prompts/heads artifact paths
    [train.zr] # zero-reference loss weights and sizes

Environment variables ``CUELIGHT_<SECTION>_<KEY>`` (``CUELIGHT_SEED`` for
the root seed) override the file; command-line flags override both.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import sys
from pathlib import Path

from .clip import FineTuneConfig
from .errors import ConfigError
from .losses import ZeroRefConfig
from .prior import PriorConfig
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "CUELIGHT_"


def _fields(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        value = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def defaults() -> dict:
    train = _fields(TrainConfig, skip=("seed", "zr"))
    train.update({"prompts": None, "heads": None, "zr": _fields(ZeroRefConfig)})
    return {
        "seed": 0,
        "backend": {"kind": "mock", "path": None},
        "data": {
            "images_dir": None,
            "annotations": None,
            "min_confidence": None,
            "patch_size": 224,
            "membership": "center",
            "sources": [],
        },
        "prior": _fields(PriorConfig, skip=("seed",)),
        "heads": _fields(FineTuneConfig, skip=("seed",)),
        "train": train,
    }


# keys whose default is None but whose values are numeric
_NUMERIC_OPTIONAL = {"train.max_steps": 0, "data.min_confidence": 0.0}


def _coerce(value, default, key: str, from_text: bool = False):
    """Cast ``value`` to the type of ``default``.

    With ``from_text`` (environment and flag values) strings are parsed as
    TOML literals first.
    """
    if default is None:
        default = _NUMERIC_OPTIONAL.get(key)
    if default is None or value is None:
        return value
    if from_text and isinstance(value, str) and not isinstance(default, str):
        try:
            value = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def _merge(base: dict, update: dict, ref: dict, where: str) -> None:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in ref:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(ref[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            _merge(base[key], value, ref[key], path + ".")
        else:
            base[key] = _coerce(value, ref[key], path)


def set_dotted(cfg: dict, dotted: str, value, ref: dict | None = None, from_text: bool = True) -> None:
    ref = ref or defaults()
    *parents, leaf = dotted.split(".")
    node, rnode = cfg, ref
    for p in parents:
        if p not in rnode or not isinstance(rnode[p], dict):
            raise ConfigError(f"{dotted}: unknown key")
        node, rnode = node[p], rnode[p]
    if leaf not in rnode:
        raise ConfigError(f"{dotted}: unknown key")
    node[leaf] = _coerce(value, rnode[leaf], dotted, from_text)


def _env_overrides(env, ref: dict) -> dict:
    out = {}

    def walk(node, path):
        for key, value in node.items():
            dotted = path + [key]
            if isinstance(value, dict):
                walk(value, dotted)
            else:
                name = ENV_PREFIX + "_".join(dotted).upper()
                if name in env:
                    out[".".join(dotted)] = env[name]

    walk(ref, [])
    return out


def resolve(path=None, overrides: dict | None = None, env=None) -> dict:
    """Merge defaults, the TOML file, environment and flag overrides."""
    ref = defaults()
    cfg = copy.deepcopy(ref)
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            _merge(cfg, doc, ref, "")
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _resolve_paths(cfg, path.parent)
    env = os.environ if env is None else env
    for dotted, value in _env_overrides(env, ref).items():
        set_dotted(cfg, dotted, value, ref)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_dotted(cfg, dotted, value, ref)
    return cfg


def _resolve_paths(cfg: dict, base: Path) -> None:
    # relative paths in a config file are relative to that file
    def fix(node, key):
        if isinstance(node.get(key), str) and node[key]:
            node[key] = str(base / node[key])

    for key in ("images_dir", "annotations"):
        fix(cfg["data"], key)
    for src in cfg["data"]["sources"]:
        for key in ("images_dir", "annotations"):
            fix(src, key)
    fix(cfg["backend"], "path")
    fix(cfg["train"], "prompts")
    fix(cfg["train"], "heads")


def prior_config(cfg: dict) -> PriorConfig:
    p = dict(cfg["prior"])
    for key in ("brightness", "contrast", "hue"):
        p[key] = tuple(p[key])
    return PriorConfig(seed=cfg["seed"], **p)


def heads_config(cfg: dict) -> FineTuneConfig:
    return FineTuneConfig(seed=cfg["seed"], **cfg["heads"])


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in ("prompts", "heads")}
    return TrainConfig(seed=cfg["seed"], **t)
