"""Run configuration: one INI file captures every experimental choice.

Sections: [arch], [boundary], [train], [scenes], [paths]. Every key has a
default; unknown sections or keys are rejected by name so a typo cannot
silently fall back to a default. Command-line overrides use the same
"section.key=value" addressing and are validated identically.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .boundary import BoundaryRule
from .network import ArchConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_int_tuple(raw: str) -> tuple:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _to_opt_mask(raw: str) -> str | None:
    low = raw.strip().lower()
    if low in ("", "arch", "none"):
        return None
    return low


_SCHEMA: dict[str, dict[str, object]] = {
    "arch": {
        "depth": int,
        "downsample": int,
        "agg_k": int,
        "c_mid": int,
        "c_feat": int,
        "base_width": int,
        "max_width": int,
        "use_gco": _to_bool,
        "c_geo": int,
        "m": int,
        "mask_mode": str,
        "mask_layers": int,
        "mask_min_points": int,
        "bpm_hidden": _to_int_tuple,
        "bpm_k": int,
        "head_hidden": int,
        "phi_hidden": int,
    },
    "boundary": {
        "k": int,
        "ratio": float,
        "w1": float,
        "w2": float,
    },
    "train": {
        "batch_size": int,
        "epochs": int,
        "lr": float,
        "seed": int,
        "bpm_on": _to_bool,
        "mask": _to_opt_mask,
        "val_scenes": int,
    },
    "scenes": {
        "count": int,
        "seed": int,
        "classes": int,
        "points": int,
        "noise": float,
    },
    "paths": {
        "data_dir": str,
        "out_dir": str,
    },
}

_DEFAULTS: dict[str, dict[str, object]] = {
    "arch": {},
    "boundary": {},
    "train": {"mask": None, "val_scenes": 0},
    "scenes": {"count": 30, "seed": 7, "classes": 4, "points": 4096, "noise": 0.08},
    "paths": {"data_dir": "data", "out_dir": "out"},
}


@dataclass
class SceneParams:
    count: int = 30
    seed: int = 7
    classes: int = 4
    points: int = 4096
    noise: float = 0.08

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("scenes.count must be at least 1")
        if self.points < 8:
            raise ConfigError("scenes.points must be at least 8")
        if self.noise < 0:
            raise ConfigError("scenes.noise must be nonnegative")


@dataclass
class RunConfig:
    arch: ArchConfig
    rule: BoundaryRule
    w1: float
    w2: float
    train: TrainConfig
    val_scenes: int
    scenes: SceneParams
    data_dir: str
    out_dir: str


def _cast(section: str, key: str, raw: str):
    caster = _SCHEMA[section][key]
    try:
        return caster(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None


def _validated_values(parser: configparser.ConfigParser) -> dict[str, dict[str, object]]:
    values: dict[str, dict[str, object]] = {s: dict(d) for s, d in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[section][key] = _cast(section, key, raw)
    return values


def _resolve_bare_key(key: str) -> str:
    hits = [section for section, keys in _SCHEMA.items() if key in keys]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        options = ", ".join(f"{s}.{key}" for s in hits)
        raise ConfigError(f"ambiguous config key {key!r}; use one of: {options}")
    return hits[0]


def apply_overrides(parser: configparser.ConfigParser, overrides: list[str]) -> None:
    """Apply "section.key=value" (or unambiguous "key=value") override strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        address, _, raw = item.partition("=")
        address = address.strip()
        if "." in address:
            section, _, key = address.partition(".")
            section, key = section.strip(), key.strip()
        else:
            key = address
            section = _resolve_bare_key(key)
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, raw.strip())


def build_run_config(parser: configparser.ConfigParser) -> RunConfig:
    values = _validated_values(parser)
    try:
        arch = ArchConfig(**values["arch"])
        rule_kwargs = {k: v for k, v in values["boundary"].items() if k in ("k", "ratio")}
        rule = BoundaryRule(**rule_kwargs)
        w1 = float(values["boundary"].get("w1", 1.0))
        w2 = float(values["boundary"].get("w2", 10.0))
        if w1 <= 0 or w2 <= 0:
            raise ValueError("boundary loss weights must be positive")
        train = TrainConfig(
            batch_size=int(values["train"].get("batch_size", 2)),
            epochs=int(values["train"].get("epochs", 50)),
            lr=float(values["train"].get("lr", 1e-3)),
            seed=int(values["train"].get("seed", 0)),
            bpm_on=bool(values["train"].get("bpm_on", True)),
            mask_mode=values["train"]["mask"],
        )
        val_scenes = int(values["train"]["val_scenes"])
        if val_scenes < 0:
            raise ValueError("train.val_scenes must be nonnegative")
        scenes = SceneParams(**values["scenes"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        arch=arch,
        rule=rule,
        w1=w1,
        w2=w2,
        train=train,
        val_scenes=val_scenes,
        scenes=scenes,
        data_dir=str(values["paths"]["data_dir"]),
        out_dir=str(values["paths"]["out_dir"]),
    )


def parse_config(path, overrides: list[str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if overrides:
        apply_overrides(parser, overrides)
    return build_run_config(parser)


def default_config() -> RunConfig:
    return build_run_config(configparser.ConfigParser())