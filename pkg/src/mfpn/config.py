"""Flat ``key: value`` experiment configuration files.

Nested settings use dotted keys (``train.lr``).  Lines starting with ``#``
and blank lines are ignored; unknown keys are errors.  :func:`dump_config`
always writes every key in canonical order, so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .pyramids import EXTRA_POLICIES, KINDS, FpnConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "mfpn"
    levels: tuple = (2, 3, 4, 5)
    channels: int = 256
    backbone_channels: tuple = (256, 512, 1024, 2048)
    extra_levels: str = "off"
    stem_channels: int = 8
    lr: float = 0.05
    epochs: int = 1
    scenes_per_epoch: int = 500
    seed: int = 0
    image_size: int = 128
    eval_scenes: int = 200
    eval_seed: int = 1000
    out: str = "runs/default"

    def fpn_config(self) -> FpnConfig:
        return FpnConfig(self.levels, self.channels, self.backbone_channels, self.extra_levels)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.extra_levels not in EXTRA_POLICIES:
            raise ConfigError(f"extra_levels: expected one of {EXTRA_POLICIES}")
        for name in ("channels", "stem_channels", "epochs", "scenes_per_epoch", "eval_scenes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_key_of(name)}: must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"train.lr: must be >= 0, got {self.lr}")
        if self.image_size < 1 or self.image_size % 2 ** self.levels[len(self.backbone_channels) - 1]:
            raise ConfigError(f"train.image_size: {self.image_size} not divisible by the deepest stride")
        try:
            self.fpn_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


# file key -> (field name, parser, formatter)
def _levels(text: str) -> tuple:
    lo, sep, hi = text.partition("-")
    if not sep:
        raise ValueError("expected a range like 2-5")
    return tuple(range(int(lo), int(hi) + 1))


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _fmt_levels(v: tuple) -> str:
    return f"{v[0]}-{v[-1]}"


def _fmt_ints(v: tuple) -> str:
    return ",".join(str(x) for x in v)


KEYS = {
    "kind": ("kind", str, str),
    "levels": ("levels", _levels, _fmt_levels),
    "channels": ("channels", int, str),
    "backbone_channels": ("backbone_channels", _ints, _fmt_ints),
    "extra_levels": ("extra_levels", str, str),
    "backbone.stem_channels": ("stem_channels", int, str),
    "train.lr": ("lr", float, repr),
    "train.epochs": ("epochs", int, str),
    "train.scenes_per_epoch": ("scenes_per_epoch", int, str),
    "train.seed": ("seed", int, str),
    "train.image_size": ("image_size", int, str),
    "eval.scenes": ("eval_scenes", int, str),
    "eval.seed": ("eval_seed", int, str),
    "out": ("out", str, str),
}
assert {k[0] for k in KEYS.values()} == {f.name for f in fields(ExperimentConfig)}


def _key_of(field_name: str) -> str:
    return next(k for k, v in KEYS.items() if v[0] == field_name)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition(":")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key: value', got {stripped!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        field_name, parse, _ = KEYS[key]
        try:
            values[field_name] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {raw!r} ({exc})") from None
    try:
        return ExperimentConfig(**values).validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{key}: {fmt(getattr(cfg, name))}\n" for key, (name, _, fmt) in KEYS.items())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), str(path))
    for line in dump_config(cfg).splitlines():
        log.info("config %s", line)
    return cfg


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(dump_config(cfg))


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(cfg, **changes).validate() if changes else cfg
