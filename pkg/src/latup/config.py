"""Run configuration: INI-style sections with strict schema validation.

Every key is typed and validated before any work starts; unknown sections
or keys are rejected by name.  File values override the defaults and
command-line overrides (``section.key=value``) override the file.  The
effective config can be serialized back to canonical INI for provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import NetworkSpec
from .train import PlateauConfig, TrainConfig

MODALITIES = ("t1ce", "t2", "flair")


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_size(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError(f"expected D,H,W or a single extent, got {text!r}")
    return tuple(_parse_int(p) for p in parts)


def _parse_modalities(text: str) -> tuple[str, ...]:
    parts = tuple(p.strip().lower() for p in text.split(","))
    if parts != MODALITIES:
        raise ConfigError(
            f"modalities are fixed as {','.join(MODALITIES)}, got {text!r}")
    return parts


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "input_size": (_parse_size, (128, 128, 128)),
        "base_filters": (_parse_int, 32),
        "se_reduction": (_parse_int, 8),
        "dropout": (_parse_float, 0.2),
        "l2": (_parse_float, 0.02),
        "seed": (_parse_int, 0),
    },
    "train": {
        "lr": (_parse_float, 1e-4),
        "epochs": (_parse_int, 200),
        "batch": (_parse_int, 1),
        "seed": (_parse_int, 0),
        "plateau": (_parse_bool, False),
        "plateau_factor": (_parse_float, 0.5),
        "plateau_patience": (_parse_int, 10),
        "plateau_min_delta": (_parse_float, 1e-4),
        "plateau_min_lr": (_parse_float, 0.0),
    },
    "data": {
        "modalities": (_parse_modalities, MODALITIES),
    },
    "eval": {
        "exclude_et_absent": (_parse_bool, True),
    },
}


@dataclass
class RunConfig:
    """Validated effective configuration (see SCHEMA for keys/defaults)."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def network_spec(self) -> NetworkSpec:
        m = self.values["model"]
        return NetworkSpec(
            input_shape=tuple(m["input_size"]) + (len(MODALITIES),),
            base_filters=m["base_filters"],
            se_reduction=m["se_reduction"],
            dropout_rate=m["dropout"],
            l2_lambda=m["l2"],
        )

    def train_config(self) -> TrainConfig:
        m = self.values["model"]
        t = self.values["train"]
        return TrainConfig(
            lr=t["lr"], epochs=t["epochs"], batch=t["batch"],
            dropout=m["dropout"], l2=m["l2"], seed=t["seed"],
            plateau=PlateauConfig(
                enabled=t["plateau"], factor=t["plateau_factor"],
                patience=t["plateau_patience"],
                min_delta=t["plateau_min_delta"], min_lr=t["plateau_min_lr"]),
        )

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def _defaults() -> dict[str, dict[str, object]]:
    return {section: {key: default for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()}


def _apply(values: dict, section: str, key: str, raw: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parser, _ = SCHEMA[section][key]
    try:
        values[section][key] = parser(raw)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def load_config(path=None, overrides: tuple[str, ...] = ()) -> RunConfig:
    """Defaults, then file values, then ``section.key=value`` overrides."""
    values = _defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw)
    for override in overrides:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ConfigError(
                f"override must look like section.key=value, got {override!r}")
        target, raw = override.split("=", 1)
        section, key = target.split(".", 1)
        _apply(values, section.strip(), key.strip(), raw.strip())

    config = RunConfig(values)
    config.network_spec().validate()
    config.train_config().validate()
    return config
