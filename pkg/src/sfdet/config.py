"""Run configuration: typed sections, a flat ``section.key=value`` text
format (diff-friendly for ablation sweeps), and environment overrides.

Any key can be overridden by an environment variable named
``SFDET_<SECTION>_<KEY>`` (upper-cased, dots replaced by underscores).
Unknown keys are rejected at parse time.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig, SceneConfig, ShiftProfile
from .detector import DetectorConfig

ENV_PREFIX = "SFDET_"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    num_classes: int = 3
    image_size: int = 32
    source_train: int = 200
    target_train: int = 200
    target_test: int = 100
    min_objects: int = 1
    max_objects: int = 5
    overlap_cap: float = 0.3
    box_min: float = 0.22
    box_max: float = 0.45
    seed: int = 0
    shift_noise: float = 0.05
    shift_contrast: float = 1.0
    shift_haze: float = 0.5


@dataclass
class DetectorSection:
    embed_dim: int = 32
    num_queries: int = 16
    decoder_layers: int = 3
    ffn_dim: int = 64


@dataclass
class MatchSection:
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0


@dataclass
class LossSection:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cls_weight: float = 16.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0


@dataclass
class ContrastSection:
    enabled: bool = True
    bank_capacity: int = 100
    temperature: float = 0.07
    weight: float = 0.4
    strategy: str = "fifo"  # fifo | random | center


@dataclass
class ReweightSection:
    enabled: bool = True
    beta: float = 0.2
    mode: str = "matched"  # encoder | matched | all
    roi_size: int = 7
    roi_samples: int = 2


@dataclass
class DistillSection:
    enabled: bool = True
    beta: float = 1.0
    weight: float = 0.1


@dataclass
class TeacherSection:
    ema_rate: float = 0.999
    conf_thresh: float = 0.3
    update_strategy: str = "dynamic"  # dynamic | fixed:N
    base_interval: int = 5
    interval_growth: int = 5


@dataclass
class TrainSection:
    pretrain_epochs: int = 120
    pretrain_lr: float = 2e-3
    pretrain_lr_drop: float = 0.8   # fraction of epochs after which lr /= 10
    pretrain_aug: str = "strong"    # weak | strong view for supervised training
    # pretraining photometric coverage is narrower than the adaptation
    # strong view, so part of the domain shift stays learnable
    pretrain_contrast_lo: float = 0.65
    pretrain_contrast_hi: float = 1.1
    adapt_epochs: int = 12
    adapt_lr: float = 5e-5
    pretrain_batch: int = 8
    adapt_batch: int = 4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_interval: int = 10


@dataclass
class AugmentSection:
    weak_noise: float = 0.01
    weak_jitter: float = 0.75
    strong_noise: float = 0.08
    channel_jitter: float = 0.25
    contrast_lo: float = 0.4
    contrast_hi: float = 1.1
    brightness_jitter: float = 0.1
    erase_prob: float = 0.7
    erase_lo: float = 0.1
    erase_hi: float = 0.35


@dataclass
class EvalSection:
    conf_floor: float = 0.05
    iou_thresh: float = 0.5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    match: MatchSection = field(default_factory=MatchSection)
    loss: LossSection = field(default_factory=LossSection)
    contrast: ContrastSection = field(default_factory=ContrastSection)
    reweight: ReweightSection = field(default_factory=ReweightSection)
    distill: DistillSection = field(default_factory=DistillSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- derived views -------------------------------------------------

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(num_classes=d.num_classes, image_size=d.image_size,
                           min_objects=d.min_objects, max_objects=d.max_objects,
                           overlap_cap=d.overlap_cap, box_min=d.box_min,
                           box_max=d.box_max)

    def shift_profile(self) -> ShiftProfile:
        d = self.data
        return ShiftProfile(noise_sigma=d.shift_noise, contrast_scale=d.shift_contrast,
                            haze_blend=d.shift_haze)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(image_size=self.data.image_size,
                              embed_dim=self.detector.embed_dim,
                              num_queries=self.detector.num_queries,
                              decoder_layers=self.detector.decoder_layers,
                              num_classes=self.data.num_classes,
                              ffn_dim=self.detector.ffn_dim)

    def augment_config(self) -> AugmentConfig:
        a = self.augment
        return AugmentConfig(weak_noise=a.weak_noise, weak_jitter=a.weak_jitter,
                             strong_noise=a.strong_noise, channel_jitter=a.channel_jitter,
                             contrast_range=(a.contrast_lo, a.contrast_hi),
                             brightness_jitter=a.brightness_jitter,
                             erase_prob=a.erase_prob, erase_frac=(a.erase_lo, a.erase_hi))

    def fixed_interval(self) -> int | None:
        """None for the dynamic schedule, else the constant interval."""
        strategy = self.teacher.update_strategy
        if strategy == "dynamic":
            return None
        if strategy.startswith("fixed:"):
            try:
                n = int(strategy.split(":", 1)[1])
            except ValueError as err:
                raise ConfigError(f"bad teacher.update_strategy '{strategy}'") from err
            if n < 1:
                raise ConfigError("fixed teacher-update interval must be >= 1")
            return n
        raise ConfigError(f"unknown teacher.update_strategy '{strategy}'")

    def validate(self) -> "RunConfig":
        self.scene_config()
        self.detector_config()
        self.shift_profile()
        self.fixed_interval()
        if self.contrast.strategy not in ("fifo", "random", "center"):
            raise ConfigError(f"unknown contrast.strategy '{self.contrast.strategy}'")
        if self.reweight.mode not in ("encoder", "matched", "all"):
            raise ConfigError(f"unknown reweight.mode '{self.reweight.mode}'")
        if self.train.pretrain_aug not in ("weak", "strong"):
            raise ConfigError(f"unknown train.pretrain_aug '{self.train.pretrain_aug}'")
        if not 0.0 <= self.teacher.conf_thresh <= 1.0:
            raise ConfigError("teacher.conf_thresh must lie in [0, 1]")
        if self.teacher.base_interval < 1 or self.teacher.interval_growth < 1:
            raise ConfigError("teacher schedule intervals must be >= 1")
        if self.train.pretrain_epochs < 0 or self.train.adapt_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        return self


def _sections(cfg: RunConfig):
    for f in fields(cfg):
        yield f.name, getattr(cfg, f.name)


def flat_items(cfg: RunConfig) -> list[tuple[str, object]]:
    out = []
    for section_name, section in _sections(cfg):
        for f in fields(section):
            out.append((f"{section_name}.{f.name}", getattr(section, f.name)))
    return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: RunConfig) -> str:
    lines = [f"{key}={_format_value(value)}" for key, value in flat_items(cfg)]
    return "\n".join(lines) + "\n"


def _parse_value(raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    try:
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"expected {kind.__name__}, got '{raw}'") from err


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigError(f"config key '{key}' is missing its section prefix")
    section_name, field_name = key.split(".", 1)
    if not hasattr(cfg, section_name) or not dataclasses.is_dataclass(getattr(cfg, section_name)):
        raise ConfigError(f"unknown config section '{section_name}'")
    section = getattr(cfg, section_name)
    if all(f.name != field_name for f in fields(section)):
        raise ConfigError(f"unknown config key '{key}'")
    kind = type(getattr(section, field_name))
    setattr(section, field_name, _parse_value(raw, kind))


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{line}'")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def env_name(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    for key, _ in flat_items(cfg):
        raw = environ.get(env_name(key))
        if raw is not None:
            set_key(cfg, key, raw)
    return cfg


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None,
                use_env: bool = True) -> RunConfig:
    """File -> env vars -> explicit key=value overrides, then validation."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        cfg = from_text(text, cfg)
    if use_env:
        apply_env_overrides(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg.validate()


def save_resolved(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.write_text(to_text(cfg))
    return path
