"""Run configuration as a sectioned ``key = value`` file.

Unknown sections and keys are rejected, so a typo never silently falls back
to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    run_name: str = "run"


# section -> key -> (owner, attribute)
_LAYOUT: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "data": (("train", "dataset"), ("train", "subset"), ("train", "split_seed")),
    "model": (("model", "head"), ("model", "n_experts"), ("model", "top_k"), ("model", "inhibition"),
              ("model", "dropout"), ("model", "pre_taps"), ("model", "post_taps"), ("model", "router_noise")),
    "train": (("train", "learning_rate"), ("train", "batch_size"), ("train", "epochs"), ("train", "eval_batch"),
              ("train", "seeds")),
    "run": (("run", "output_dir"), ("run", "run_name")),
}

_TYPES = {
    "subset": int, "split_seed": int, "n_experts": int, "top_k": int, "dropout": float, "router_noise": float,
    "learning_rate": float, "batch_size": int, "epochs": int, "eval_batch": int,
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _owner(cfg: RunConfig, owner: str):
    return {"train": cfg.train, "model": cfg.train.model, "run": cfg}[owner]


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in _LAYOUT.items():
        parser[section] = {attr: _fmt(getattr(_owner(cfg, owner), attr)) for owner, attr in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _parse_value(attr: str, raw: str):
    raw = raw.strip()
    if attr == "seeds":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if attr in ("pre_taps", "post_taps"):
        items = tuple(v.strip() for v in raw.split(",") if v.strip())
        return None if attr == "post_taps" and not raw else items
    if attr in _TYPES:
        return _TYPES[attr](raw)
    return raw


def parse_ini(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    unknown_sections = set(parser.sections()) - set(_LAYOUT)
    if unknown_sections:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown_sections))}")
    train_kw, model_kw, run_kw = {}, {}, {}
    for section in parser.sections():
        allowed = {attr: owner for owner, attr in _LAYOUT[section]}
        for key, raw in parser[section].items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                value = _parse_value(key, raw)
            except ValueError as err:
                raise ConfigError(f"[{section}] {key}: {err}") from err
            {"train": train_kw, "model": model_kw, "run": run_kw}[allowed[key]][key] = value
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(model=model, **train_kw)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return RunConfig(train=train, **run_kw)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_ini(path.read_text(encoding="utf-8"))


def replace_model(cfg: RunConfig, **changes) -> RunConfig:
    if "head" in changes and "post_taps" not in changes:
        changes["post_taps"] = None
    model = dataclasses.replace(cfg.train.model, **changes)
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, model=model))


def replace_train(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))
