"""Run configuration: ``[section]`` / ``key = value`` files plus ``--section.key=value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import EncoderConfig, InjectionConfig, NetworkConfig
from .synthgen import SceneSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    command: str = ""


@dataclass
class DataSection:
    count: int = 6
    train_fraction: float = 0.5
    val_fraction: float = 0.0
    test_fraction: float = 0.5
    patch: int = 256
    train_stride: int = 200
    test_stride: int = 250


@dataclass
class NetworkSection:
    encoder: str = "vgg-mini"
    variant: str = "FCN4s"
    dropout: float = 0.5


@dataclass
class InjectionSection:
    levels: tuple[int, ...] = (1, 2, 3, 4)
    placement: str = "after_pool"
    components: tuple[str, ...] = ("A", "H", "V", "D")
    order: int = 1


@dataclass
class TrainSection:
    lr: float = 1e-4
    epochs: int = 10
    steps_per_epoch: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # <= 0 selects the training split's background:lane ratio
    lambda_lane: float = 400.0
    augment: bool = True
    final_lr_fraction: float = 1.0


@dataclass
class SceneSection:
    width: int = 1024
    height: int = 1024
    road_count: int = 3
    road_width: tuple[int, ...] = (48, 112)
    styles: tuple[str, ...] = ("solid", "dashed", "dots", "zebra")
    stroke_width: tuple[int, ...] = (2, 8)
    clutter: float = 0.5
    shadows: int = 2
    washed_out_fraction: float = 0.15
    target_ratio: float = 389.0
    oblique_fraction: float = 0.25
    noise_sigma: float = 3.0


@dataclass
class DwtSection:
    levels: int = 4
    order: int = 1


@dataclass
class GradcheckSection:
    size: int = 32
    per_block: int = 4
    lambda_lane: float = 400.0
    tolerance: float = 1e-4


@dataclass
class AblateSection:
    train_scenes: int = 4
    test_scenes: int = 2
    seeds: tuple[int, ...] = (0, 1, 2)
    # sweep axes; an empty entry skips the axis
    lambdas: tuple[float, ...] = (1.0, -1.0)
    levels: tuple[str, ...] = ("none", "1", "12", "123", "1234")
    components: tuple[str, ...] = ("AHVD", "HV", "D")
    placements: tuple[str, ...] = ("after_pool", "before_pool", "after_conv")
    # true: run only the fixed six-condition set behind the directional checks
    standard: bool = True
    # desk-scale schedule, independent of [train]
    lr: float = 1e-3
    steps: int = 200
    dropout: float = 0.5
    final_lr_fraction: float = 0.0


@dataclass
class PathsSection:
    manifest: str = ""
    image: str = ""
    mask: str = ""
    checkpoint: str = ""
    pred: str = ""
    truth: str = ""


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "data": DataSection,
    "network": NetworkSection,
    "injection": InjectionSection,
    "train": TrainSection,
    "scene": SceneSection,
    "dwt": DwtSection,
    "gradcheck": GradcheckSection,
    "ablate": AblateSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    train: TrainSection = field(default_factory=TrainSection)
    scene: SceneSection = field(default_factory=SceneSection)
    dwt: DwtSection = field(default_factory=DwtSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- typed views -------------------------------------------------------

    def injection_config(self) -> InjectionConfig:
        i = self.injection
        return InjectionConfig(tuple(i.levels), i.placement, tuple(i.components), i.order)

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(EncoderConfig.preset(n.encoder), n.variant, self.injection_config(), n.dropout)

    def train_config(self, lambda_lane: float | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr,
            epochs=t.epochs,
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            seed=self.run.seed,
            lambda_lane=lambda_lane if lambda_lane is not None else t.lambda_lane,
            steps_per_epoch=t.steps_per_epoch,
            augment=t.augment,
            final_lr_fraction=t.final_lr_fraction,
        )

    def scene_spec(self, seed: int | None = None) -> SceneSpec:
        s = self.scene
        return SceneSpec(
            width=s.width,
            height=s.height,
            seed=self.run.seed if seed is None else seed,
            road_count=s.road_count,
            road_width=tuple(s.road_width),
            styles=tuple(s.styles),
            stroke_width=tuple(s.stroke_width),
            clutter=s.clutter,
            shadows=s.shadows,
            washed_out_fraction=s.washed_out_fraction,
            target_ratio=s.target_ratio,
            oblique_fraction=s.oblique_fraction,
            noise_sigma=s.noise_sigma,
        )

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                lines.append(f"{f.name} = {format_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_value(annotation, raw: str):
    origin = typing.get_origin(annotation)
    if origin is tuple:
        (item, *_rest) = typing.get_args(annotation)
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_parse_scalar(item, p) for p in parts)
    return _parse_scalar(annotation, raw)


def _set(cfg: RunConfig, section: str, key: str, raw: str, origin: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    obj = getattr(cfg, section)
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    try:
        value = parse_value(hints[key], raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from exc
    setattr(cfg, section, dataclasses.replace(obj, **{key: value}))


def parse_text(text: str, cfg: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: malformed config: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw, origin)
    return cfg


def load(path, cfg: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, cfg, str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``--section.key=value`` arguments."""
    for arg in overrides:
        if not arg.startswith("--") or "=" not in arg or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"override {arg!r} is not of the form --section.key=value")
        lhs, raw = arg[2:].split("=", 1)
        section, key = lhs.split(".", 1)
        _set(cfg, section, key, raw, "command line")
    return cfg


def round_trip(cfg: RunConfig) -> RunConfig:
    return parse_text(cfg.to_text())


__all__ = ["RunConfig", "ConfigError", "load", "parse_text", "apply_overrides", "round_trip", "SECTIONS"]
