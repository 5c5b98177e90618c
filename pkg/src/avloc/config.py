"""Run configuration: flat ``section.key = value`` text files.

Example::

    # model
    guidance.mode = full
    guidance.beta = 0.4
    contrast.lam = 0.6
    optim.lr = 7e-4
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .coguidance import GuidanceConfig
from .contrast import ContrastConfig
from .dataio import SyntheticSpec
from .fusion import FusionConfig
from .model import ModelConfig

__all__ = ["ConfigError", "OptimConfig", "DataConfig", "RunConfig", "parse_config", "load_config", "SECTIONS"]


class ConfigError(ValueError):
    """Bad config key or value; the message names the key."""


@dataclass
class OptimConfig:
    lr: float = 7e-4
    milestones: tuple[int, ...] = (10, 20, 30)
    gamma: float = 0.5
    epochs: int = 200
    batch_size: int = 64
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"optim.lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"optim.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"optim.batch_size must be >= 1, got {self.batch_size}")
        if self.clip_norm < 0:
            raise ValueError(f"optim.clip_norm must be >= 0 (0 disables), got {self.clip_norm}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"optim.gamma must lie in (0, 1], got {self.gamma}")


@dataclass
class DataConfig(SyntheticSpec):
    """Synthetic generation parameters, or a manifest of feature files."""

    manifest: str = ""
    val_manifest: str = ""
    val_fraction: float = 0.2

    def validate(self) -> None:
        if not self.manifest:
            super().validate()
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"data.val_fraction must lie in [0, 1), got {self.val_fraction}")

    def synthetic_spec(self) -> SyntheticSpec:
        names = {f.name for f in dataclasses.fields(SyntheticSpec)}
        return SyntheticSpec(**{k: getattr(self, k) for k in names})


@dataclass
class LossConfig:
    use_sup: bool = True


@dataclass
class InferConfig:
    theta: float = 0.5


@dataclass
class RunOptions:
    seed: int = 0
    out: str = "runs/default"
    record_time: bool = False


@dataclass
class RunConfig:
    run: RunOptions = field(default_factory=RunOptions)
    data: DataConfig = field(default_factory=DataConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def model_config(self, d_v: int | None = None, d_a: int | None = None, H: int | None = None, W: int | None = None, C: int | None = None) -> ModelConfig:
        return ModelConfig(
            d_v=d_v or self.data.d_v,
            d_a=d_a or self.data.d_a,
            H=H or self.data.H,
            W=W or self.data.W,
            num_classes=C or self.data.C,
            guidance=dataclasses.replace(self.guidance),
            fusion=dataclasses.replace(self.fusion),
            contrast=dataclasses.replace(self.contrast),
            use_sup=self.loss.use_sup,
            theta=self.infer.theta,
        )

    def validate(self) -> None:
        for section in SECTIONS:
            obj = getattr(self, section)
            if hasattr(obj, "validate"):
                try:
                    obj.validate()
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
        if not 0 < self.infer.theta <= 1:
            raise ConfigError(f"infer.theta must lie in (0, 1], got {self.infer.theta}")

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if name not in hints or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _coerce(raw, hints[name])
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {hints[name]}") from None
        setattr(obj, name, value)

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def copy(self) -> "RunConfig":
        return parse_config(self.to_text())


SECTIONS = ("run", "data", "guidance", "fusion", "contrast", "loss", "infer", "optim")


def _coerce(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typing.get_origin(typ) is tuple:
        return tuple(int(x) for x in raw.replace(",", " ").split())
    raise ValueError(raw)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_config(text: str, source: str = "<config>", overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    for key, value in (overrides or {}).items():
        cfg.set(key, str(value))
    cfg.validate()
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
