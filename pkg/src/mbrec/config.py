"""Flat key=value configuration with defaults, file values and overrides.

Keys use dotted prefixes to group related settings (``model.d=64``,
``diffusion.T=200``). Precedence is overrides > file > defaults. Every key
has a typed default below; values from files or flags are parsed to that
type and unknown keys are rejected.

Seed streams: all randomness flows from one master seed. Independent streams
are derived as ``derive_seed(master, tag)``, the first 8 bytes of
blake2b(``"<master>/<tag>"``) as a little-endian integer, so adding a new
stream never perturbs existing ones.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .data import ConfigError

DEFAULTS: dict[str, object] = {
    "data.L": 50,
    "data.min_interactions": 2,
    "model.d": 64,
    "model.heads": 4,
    "model.layers": 2,
    "model.dropout": 0.1,
    "model.position_mode": "brope",
    "model.behavior_input": True,
    "model.rotary_base": 10000.0,
    "diffusion.T": 200,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "diffusion.stride": 20,
    "diffusion.omega": 1.0,
    "diffusion.null_prob": 0.2,
    "denoiser.kind": "moe",
    "denoiser.depth": 2,
    "denoiser.shared": 1,
    "denoiser.private": 1,
    "train.lr": 2e-3,
    "train.weight_decay": 0.01,
    "train.batch": 256,
    "train.rho": 0.2,
    "train.sigma": 0.2,
    "train.epochs1": 100,
    "train.epochs2": 100,
    "train.epochs3": 20,
    "train.seed": 0,
    "eval.ks": "10,20",
}


def derive_seed(master: int, tag: str) -> int:
    digest = hashlib.blake2b(f"{master}/{tag}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") & ((1 << 63) - 1)


def _parse_value(key: str, text: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") \
                from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") \
                from None
    return text


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Resolved configuration: a full mapping over every known key."""

    def __init__(self, values: dict[str, object]):
        self._values = dict(values)

    def __getitem__(self, key: str) -> object:
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self._values == other._values

    @property
    def seed(self) -> int:
        return self._values["train.seed"]

    def ks(self) -> list[int]:
        try:
            ks = [int(k) for k in str(self._values["eval.ks"]).split(",") if k]
        except ValueError:
            raise ConfigError(f"eval.ks: expected comma-separated integers, "
                              f"got {self._values['eval.ks']!r}") from None
        if not ks or any(k < 1 for k in ks):
            raise ConfigError("eval.ks must list positive integers")
        return ks

    def model_config(self):
        from .model import ModelConfig
        cfg = ModelConfig(
            d=self["model.d"], heads=self["model.heads"],
            layers=self["model.layers"], dropout=self["model.dropout"],
            position_mode=self["model.position_mode"],
            behavior_input=self["model.behavior_input"],
            rotary_base=self["model.rotary_base"])
        cfg.validate()
        return cfg

    def items(self):
        return self._values.items()

    def with_values(self, updates: dict[str, object]) -> "Config":
        """New Config with the given keys replaced by already-typed values."""
        values = dict(self._values)
        for key, value in updates.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return Config(values)

    def with_overrides(self, overrides: dict[str, str]) -> "Config":
        """New Config with string overrides parsed to each key's type."""
        values = dict(self._values)
        for key, text in overrides.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, str(text))
        return Config(values)

    def echo_lines(self) -> list[str]:
        return [f"{key}={_format_value(self._values[key])}"
                for key in sorted(self._values)]

    def write_echo(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.echo_lines()))
        return path


def parse_config_file(path) -> dict[str, str]:
    """Read key=value lines; '#' starts a comment, blank lines are skipped,
    duplicate keys are an error (silent last-wins hides typos).
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve_config(file_values: dict[str, str] | None = None,
                   overrides: dict[str, str] | None = None) -> Config:
    """Merge defaults, a parsed config file, and override strings."""
    values = dict(DEFAULTS)
    for source in (file_values or {}), (overrides or {}):
        for key, text in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, str(text))
    return Config(values)
