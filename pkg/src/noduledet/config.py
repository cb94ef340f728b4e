"""Pipeline configuration: ``[section]`` headers with ``key = value`` lines."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace

from .fprnet import POOLINGS, VARIANTS

STRATEGIES = ("proposed", "uniform")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 40
    n_test: int = 20
    shape: tuple[int, int, int] = (24, 128, 128)
    nodule_count: tuple[int, int] = (1, 3)
    diameter_mm: tuple[float, float] = (5.0, 12.0)
    seed: int = 2024


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = "proposed"
    patch_size: int = 64
    budget_scale: float = 0.1
    max_patches: int = 400
    seed: int = 11


@dataclass(frozen=True)
class SegConfig:
    # desk-scale rates; the full-scale recipe is lr=1e-4, finetune_lr=1e-5, batch_size=64
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 15
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 13
    infer_batch: int = 16


@dataclass(frozen=True)
class MiningConfig:
    hard_mining: bool = True
    overlap: str = "iou"
    threshold: float = 0.5
    rounds: int = 1
    max_negatives: int = 300
    max_positives: int = 300
    seed: int = 17


@dataclass(frozen=True)
class ClassifierSection:
    variants: tuple[str, ...] = VARIANTS
    pooling: str = "dual"
    width: float = 0.125
    random_mask: bool = True
    lr: float = 1e-3
    decay: float = 0.9
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    max_negatives: int = 200
    seed: int = 19


@dataclass(frozen=True)
class EnsembleConfig:
    weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)


@dataclass(frozen=True)
class RuntimeConfig:
    threads: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def __post_init__(self):
        validate(self)

    def to_text(self) -> str:
        return dump_config(self)

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        """Apply ``{"section.key": "text value"}`` overrides.

        New classifier variants without explicit weights get equal weights.
        """
        overrides = dict(overrides)
        variants = overrides.get("classifier.variants")
        if variants is not None and "ensemble.weights" not in overrides:
            n = len([v for v in variants.split(",") if v.strip()])
            overrides["ensemble.weights"] = ", ".join([f"1/{n}"] * n)
        sections = {f.name: getattr(self, f.name) for f in fields(self)}
        for dotted, text in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in sections or key not in {f.name for f in fields(sections[section])}:
                raise ConfigError(f"unknown config key {dotted!r}")
            ftype = {f.name: f for f in fields(sections[section])}[key]
            sections[section] = replace(sections[section], **{key: _parse(ftype, text, dotted)})
        return PipelineConfig(**sections)


class ConfigError(ValueError):
    pass


def validate(cfg: PipelineConfig) -> None:
    if cfg.sampling.strategy not in STRATEGIES:
        raise ConfigError(f"sampling.strategy must be one of {STRATEGIES}")
    if cfg.classifier.pooling not in POOLINGS:
        raise ConfigError(f"classifier.pooling must be one of {POOLINGS}")
    if not cfg.classifier.variants:
        raise ConfigError("at least one classifier variant is required")
    for v in cfg.classifier.variants:
        if v not in VARIANTS + ("dense2d",):
            raise ConfigError(f"unknown classifier variant {v!r}")
    if len(cfg.ensemble.weights) != len(cfg.classifier.variants):
        raise ConfigError("ensemble.weights needs one weight per classifier variant")
    if abs(sum(cfg.ensemble.weights) - 1.0) > 1e-9 or min(cfg.ensemble.weights) < 0:
        raise ConfigError("ensemble weights must be non-negative and sum to 1")
    if cfg.data.n_train < 1 or cfg.data.n_test < 1:
        raise ConfigError("need at least one training and one test scan")
    if cfg.mining.overlap not in ("iou", "dice"):
        raise ConfigError("mining.overlap must be iou or dice")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(f: dataclasses.Field, text: str, where: str):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            if f.name == "weights":
                return tuple(_fraction(p) for p in parts)
            return tuple(kind(p) for p in parts)
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def _fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


def dump_config(cfg: PipelineConfig) -> str:
    out = io.StringIO()
    for sec in fields(cfg):
        out.write(f"[{sec.name}]\n")
        section = getattr(cfg, sec.name)
        for f in fields(section):
            out.write(f"{f.name} = {_format(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    overrides = {}
    known = {f.name for f in fields(PipelineConfig)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            overrides[f"{section}.{key}"] = value
    return PipelineConfig().with_overrides(overrides)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
