"""Plain-text experiment configuration (INI sections of key = value).

Every key has a default below; unknown sections or keys are rejected. The
fully resolved configuration is what gets written into run directories.
"""

from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path

from .agents import ArchConfig, ChannelConfig
from .errors import ConfigError
from .games import GameConfig
from .training import TrainConfig

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {
        "seed": 0,
        "games": ("referential", "vqa"),
        "ref_char_counts": (2, 3, 4, 5),
        "ref_train_count": 1000,
        "ref_eval_count": 200,
        "distractors": 2,
        "vqa_ks": (1, 2, 4, 8, 18),
        "vqa_char_count": 5,
        "vqa_train_count": 1000,
        "vqa_eval_count": 200,
    },
    "game": {
        "kind": "referential",
        "char_count": 2,
        "split_k": 8,
        "distractors": 2,
        "vocab_size": 50,
        "message_length": 15,
        "channels": (16, 32, 32, 32),
        "feature_dim": 128,
        "hidden": 128,
        "symbol_embed": 32,
        "mlp_hidden": 64,
    },
    "train": {
        "seeds": (0, 1, 2),
        "epochs": 10,
        "batch_size": 32,
        "lr": 1e-3,
        "entropy_coef": 0.01,
        "baseline_decay": 0.99,
        "eval_every": 100,
    },
    "analysis": {
        "correlation": "spearman",
        "probe_epochs": 200,
        "probe_lr": 0.01,
        "probe_hidden": 0,
        "svg": True,
    },
}


def _parse(value: str, default, where: str):
    value = value.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(v) for v in items)
            return tuple(items)
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r}") from None


def load_config(path=None, text: str | None = None) -> dict[str, dict[str, object]]:
    """Defaults overlaid with the file (or ``text``); unknown keys raise ConfigError."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read configuration: {exc}") from None
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = _parse(value, DEFAULTS[section][key], f"{section}.{key}")
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(cfg) -> str:
    buf = io.StringIO()
    for section in DEFAULTS:
        buf.write(f"[{section}]\n")
        for key in DEFAULTS[section]:
            buf.write(f"{key} = {_format(cfg[section][key])}\n")
        buf.write("\n")
    return buf.getvalue()


def write_config(cfg, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def game_config(cfg) -> GameConfig:
    g = cfg["game"]
    return GameConfig(
        kind=g["kind"], distractors=g["distractors"], char_count=g["char_count"], split_k=g["split_k"],
        channel=ChannelConfig(g["vocab_size"], g["message_length"]),
        arch=ArchConfig(tuple(g["channels"]), g["feature_dim"], g["hidden"], g["symbol_embed"], g["mlp_hidden"]))


def train_config(cfg, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       entropy_coef=t["entropy_coef"], baseline_decay=t["baseline_decay"],
                       seed=seed, eval_every=t["eval_every"])
