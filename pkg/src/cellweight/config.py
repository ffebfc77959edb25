"""Run configuration: one YAML file with a section per pipeline stage.

Unknown keys are rejected at every level. ``--set section.key=value``
overrides on the command line are parsed as YAML scalars/lists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .synthdata import DEFAULT_PALETTE, MARROW_COUNTS


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    n_regions: int = 20
    canvas: tuple[int, int] = (128, 128)
    cells_per_region: int = 30
    class_palette: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    class_frequencies: dict[str, float] = field(default_factory=lambda: {k: float(v) for k, v in MARROW_COUNTS.items()})
    cell_radius_mean: float = 4.0
    cell_radius_sigma: float = 0.4
    noise_sigma: float = 0.02
    color_jitter: float = 0.03
    background: tuple[float, float, float] = (0.88, 0.86, 0.84)
    texture_amplitude: float = 0.04
    texture_scale_px: float = 6.0
    min_separation_px: float = 10.0
    micron_per_pixel: float = 0.442


@dataclass
class PrepareSection:
    regions_dir: str = ""  # empty: <workdir>/synth/regions
    strategy: str = "ExpWeightType1"
    radius_px: float = 4.0
    patch_size: int = 64
    stride: int = 64
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)


@dataclass
class DetectorSection:
    levels: int = 2
    base_filters: int = 8
    batch_norm: bool = False


@dataclass
class ClassifierSection:
    conv_filters: tuple[int, ...] = (16, 32, 64)
    hidden_units: int = 200


@dataclass
class TrainSection:
    batch_size: int = 8
    max_epochs: int = 20
    early_stop_patience: int = 10
    learning_rate: float = 1e-4
    augment: bool = False


@dataclass
class DetectSection:
    tile: int = 64
    overlap: int = 0
    threshold: float = 0.5
    min_distance: float = 5.0
    classify: bool = True


@dataclass
class EvaluateSection:
    caps: tuple[float, ...] = tuple(float(c) for c in range(1, 21))
    cap_px: float = 10.0
    plots: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    classes: tuple[str, ...] = ("CD8+", "CD4+/FOXP3-", "CD4+/FOXP3+")
    synth: SynthSection = field(default_factory=SynthSection)
    prepare: PrepareSection = field(default_factory=PrepareSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    train: TrainSection = field(default_factory=TrainSection)
    detect: DetectSection = field(default_factory=DetectSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false")
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            kwargs[name] = type(default)(value)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping")
            kwargs[name] = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
        else:
            kwargs[name] = str(value)
    return cls(**kwargs)


def _set_dotted(data: dict, key: str, value: Any):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    cfg = _build(RunConfig, data, "")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if len(set(cfg.classes)) != len(cfg.classes) or len(cfg.classes) < 2:
        raise ConfigError("classes must list at least two unique names")
    for section in ("class_palette", "class_frequencies"):
        if set(getattr(cfg.synth, section)) != set(cfg.classes):
            raise ConfigError(f"synth.{section} must name exactly the configured classes")
    if abs(sum(cfg.prepare.fractions) - 1.0) > 1e-9 or len(cfg.prepare.fractions) != 3:
        raise ConfigError("prepare.fractions must be three numbers summing to 1")
    if cfg.train.early_stop_patience >= cfg.train.max_epochs:
        raise ConfigError("train.early_stop_patience must be < train.max_epochs")
    if cfg.prepare.patch_size % (1 << cfg.detector.levels):
        raise ConfigError("prepare.patch_size must be divisible by 2**detector.levels")
    if cfg.detect.tile % (1 << cfg.detector.levels):
        raise ConfigError("detect.tile must be divisible by 2**detector.levels")


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True, allow_unicode=True)
    return path
