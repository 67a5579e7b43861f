"""Run configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # adaptation (defaults follow the published recipe)
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    tau: float = 0.95
    lambda_la: float = 0.3
    seed: int = 0
    enable_dis: bool = True
    enable_fr: bool = True
    enable_la: bool = True
    augment: bool = True
    freeze_bank: bool = False
    drop_unconfident: bool = False
    # models
    teacher_logit_scale: float = 10.0
    target_logit_scale: float = 1.0
    bottleneck_relu: bool = False
    image_size: int = 32
    num_classes: int = 4
    # pretraining
    source_epochs: int = 40
    teacher_epochs: int = 30
    pretrain_lr: float = 1e-2
    # synthetic benchmark
    n_source: int = 800
    n_source_val: int = 200
    n_target: int = 800
    n_teacher: int = 1600
    shift_strength: float = 1.0
    teacher_noise_class: int = 3
    teacher_noise_to: int = 1
    teacher_noise_rate: float = 0.4
    # paths and outputs
    data_dir: str = ""
    source_ckpt: str = ""
    teacher_ckpt: str = ""
    out_dir: str = "out"
    dump_bank: bool = False
    dump_patches: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.lambda_la < 0:
            raise ConfigError("lambda_la must be >= 0")
        if self.teacher_logit_scale <= 0 or self.target_logit_scale <= 0:
            raise ConfigError("logit scales must be positive")
        if not 0.0 <= self.teacher_noise_rate <= 1.0:
            raise ConfigError("teacher_noise_rate must lie in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def parse_overrides(pairs) -> dict:
    """Turn ``key=value`` strings (or lines) into typed field values."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for item in pairs:
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """File values, then ``FRLA_SEED``, then explicit overrides (last wins)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_overrides(p.read_text().splitlines()))
    env = os.environ if env is None else env
    if env.get("FRLA_SEED"):
        values["seed"] = _coerce("FRLA_SEED", int, env["FRLA_SEED"])
    values.update(parse_overrides(overrides))
    return RunConfig(**values)
