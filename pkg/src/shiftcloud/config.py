"""Experiment configuration: one INI section per stage, flags override."""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field

from .augmentation import AugmentConfig
from .depthcloud import CloudConfig
from .errors import ConfigError
from .geometry import CameraIntrinsics
from .labeling import LabelConfig
from .model import TrainConfig
from .synthworld.noise import DepthNoiseModel


@dataclass(frozen=True)
class WorldConfig:
    width: int = 320
    height: int = 96
    hfov: float = 90.0
    spacing: float = 1.0  # meters between frames
    frame_dt: float = 0.1  # seconds between frames
    translation_sigma: float = 0.01
    rotation_sigma: float = 0.002
    render_range: float = 150.0
    use_vo_poses: bool = True  # downstream stages see the drifted odometry poses
    depth_scale_sigma: float = 0.03  # per-frame scale error of the estimated depth
    depth_rel_sigma: float = 0.05  # smooth relative depth error at 20 m, grows with depth

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        if not 0 < self.hfov < 180:
            raise ConfigError("hfov must be in (0, 180)")
        if not self.spacing > 0 or not self.frame_dt > 0:
            raise ConfigError("spacing and frame_dt must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov)

    def depth_noise(self) -> DepthNoiseModel:
        return DepthNoiseModel(self.depth_scale_sigma, self.depth_rel_sigma)


@dataclass(frozen=True)
class ModelConfig:
    point_dims: tuple = (3, 32, 64, 128)
    head_dims: tuple = (128, 64, 16, 1)
    output_scale: float = 4.0
    input_scale: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    frames: int = 135
    speed: float = 10.0
    dt: float = 0.1
    max_steer: float = 0.5
    wheelbase: float = 2.7
    alpha: float = 0.0  # 0 = calibrate with the oracle controller
    alpha_grid: tuple = (0.01, 0.0178, 0.0316, 0.0562, 0.1, 0.178, 0.316, 0.562, 1.0, 1.78, 3.16)
    lookahead: float = 5.0
    perturb: tuple = (0.0,)
    seeds: tuple = (0,)
    starts: tuple = (5, 80, 150)  # meters along each held-out track
    start_lateral: float = 0.0  # start pose offset, sign alternates over starts
    start_yaw: float = 0.0

    def __post_init__(self):
        if self.frames <= 0:
            raise ConfigError("frames must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if any(p < 0 for p in self.perturb):
            raise ConfigError("perturbation levels must be >= 0")
        if not self.seeds or not self.starts or not self.perturb:
            raise ConfigError("seeds, starts and perturb must be nonempty")


SECTIONS = {
    "world": WorldConfig,
    "cloud": CloudConfig,
    "augment": AugmentConfig,
    "label": LabelConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    cloud: CloudConfig = field(default_factory=lambda: CloudConfig(target_points=256))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=0.003, epochs=20, lr_decay=0.85, clip_norm=1.0, optimizer="adam"))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_(self, section: str, **changes) -> Config:
        try:
            new = dataclasses.replace(getattr(self, section), **changes)
        except TypeError as e:
            raise ConfigError(f"[{section}]: {e}") from None
        return dataclasses.replace(self, **{section: new})


def _parse_value(text: str, default, key: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {text!r}")
    if isinstance(default, tuple):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        kind = type(default[0]) if default else float
        return tuple(kind(float(t)) if kind is int else kind(t) for t in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        v = float(text)
        return v
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def apply_overrides(cfg: Config, section: str, values: dict, source: str = "config") -> Config:
    kind = SECTIONS.get(section)
    if kind is None:
        raise ConfigError(f"{source}: unknown section [{section}]")
    current = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(kind)}
    changes = {}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
        default = getattr(current, key)
        try:
            changes[key] = _parse_value(text, default, key) if isinstance(text, str) else text
        except ValueError as e:
            raise ConfigError(f"{source}: [{section}] {e}") from None
    return cfg.with_(section, **changes) if changes else cfg


def parse_config(text: str, source: str = "config", base: Config | None = None) -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    cfg = base or Config()
    for section in cp.sections():
        cfg = apply_overrides(cfg, section, dict(cp.items(section)), source)
    return cfg


def load_config(path, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path), base)


def to_dict(cfg: Config) -> dict:
    return {s: {f.name: _format_value(getattr(getattr(cfg, s), f.name))
                for f in dataclasses.fields(SECTIONS[s])} for s in SECTIONS}


def from_dict(d: dict) -> Config:
    cfg = Config()
    for section, values in d.items():
        cfg = apply_overrides(cfg, section, values, "manifest")
    return cfg


def format_config(cfg: Config) -> str:
    out = []
    for s, values in to_dict(cfg).items():
        out.append(f"[{s}]")
        out += [f"{k} = {v}" for k, v in values.items()]
        out.append("")
    return "\n".join(out)
