"""Experiment configuration: a TOML file whose sections mirror the package modules.

Unknown sections and keys are rejected so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .classifier import ClassifierTrainConfig
from .features import FeatureConfig
from .losses import LossWeights
from .models import EpsilonDist, ModelConfig
from .training import OptimizerConfig, TrainConfig

PROTOCOLS = ("imbalanced", "cross_lingual", "ablation", "toy")
OUTPUT_ROOT_ENV = "SERAUG_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    protocol: str = "toy"
    output_dir: str = "runs/experiment"
    seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    feature_dir: str = ""
    label_field: str = "emotion"
    folds: tuple = ()


@dataclass(frozen=True)
class ToySection:
    n_classes: int = 4
    n_per_class: int = 25
    frames: int = 32
    signal: float = 0.35
    noise: float = 0.12
    distractor: float = 0.0


@dataclass(frozen=True)
class ImbalanceSection:
    keep_fraction: float = 0.2
    protected_class: str = "Neutral"


@dataclass(frozen=True)
class CrossLingualSection:
    source_manifest: str = ""
    target_manifests: tuple = ()
    eval_fraction: float = 0.25
    low_fraction: float = 0.10
    full_fraction: float = 0.75


@dataclass(frozen=True)
class AugmentSection:
    multiplicity: int = 4


@dataclass(frozen=True)
class ClassifierSection:
    preset: str = "vgg19"
    segment_frames: int = 128
    learning_rate: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 32
    val_fraction: float = 0.1
    patience: int = 10
    eval_hop: int = 64

    def train_config(self) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(self.learning_rate, self.max_epochs, self.batch_size,
                                     self.val_fraction, self.patience, self.eval_hop)


@dataclass(frozen=True)
class LossSection:
    w_g: float = 1.0
    w_r: float = 1.0
    w_e: float = 10.0
    w_v: float = 1.0
    w_b: float = 8.0
    margin: float = 7.0
    normalize_var: bool = True


@dataclass(frozen=True)
class TsneSection:
    per_class: int = 30
    n_aug: int = 3
    perplexity: float = 30.0


_SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "toy": ToySection,
    "imbalance": ImbalanceSection,
    "cross_lingual": CrossLingualSection,
    "augment": AugmentSection,
    "features": FeatureConfig,
    "model": ModelConfig,
    "loss": LossSection,
    "train": OptimizerConfig,
    "epsilon": EpsilonDist,
    "classifier": ClassifierSection,
    "tsne": TsneSection,
}
# free-form tables: emotion -> valence
_MAPPING_SECTIONS = ("valence",)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    data: DataSection = DataSection()
    toy: ToySection = ToySection()
    imbalance: ImbalanceSection = ImbalanceSection()
    cross_lingual: CrossLingualSection = CrossLingualSection()
    augment: AugmentSection = AugmentSection()
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig = ModelConfig()
    loss: LossSection = LossSection()
    train: OptimizerConfig = OptimizerConfig()
    epsilon: EpsilonDist = EpsilonDist()
    classifier: ClassifierSection = ClassifierSection()
    tsne: TsneSection = TsneSection()
    valence: dict = field(default_factory=dict)
    base_dir: str = "."

    @property
    def protocol(self) -> str:
        return self.experiment.protocol

    @property
    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.experiment.output_dir)
        if root:
            return Path(root) / out.name
        return out if out.is_absolute() else Path(self.base_dir) / out

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def loss_weights(self) -> LossWeights:
        d = asdict(self.loss)
        d.pop("normalize_var")
        return LossWeights(**d)

    def train_config(self, weights: LossWeights | None = None) -> TrainConfig:
        return TrainConfig(optimizer=self.train, weights=weights or self.loss_weights(),
                           epsilon=self.epsilon, normalize_var=self.loss.normalize_var)

    def to_dict(self) -> dict:
        d = {}
        for name in _SECTIONS:
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(getattr(self, name)).items()}
        d["valence"] = dict(self.valence)
        return d

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=seed))


def _coerce(section: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{section}] {key} must be true or false")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"[{section}] {key} must be a number")
            value = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"[{section}] {key} must be an integer")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(data: dict, base_dir=".") -> ExperimentConfig:
    parts = {}
    for section, values in data.items():
        if section in _MAPPING_SECTIONS:
            if not all(isinstance(v, str) for v in values.values()):
                raise ConfigError(f"[{section}] entries must map emotion names to strings")
            parts[section] = dict(values)
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        parts[section] = _coerce(section, _SECTIONS[section], values)
    cfg = ExperimentConfig(**parts, base_dir=str(base_dir))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    """Protocol-specific checks: required keys present and referenced paths existing."""
    proto = cfg.protocol
    if proto not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {proto!r}; choose from {PROTOCOLS}")
    if cfg.data.label_field not in ("emotion", "valence"):
        raise ConfigError("[data] label_field must be 'emotion' or 'valence'")
    if proto == "toy":
        if cfg.model.frames != cfg.toy.frames:
            raise ConfigError("[model] frames must equal [toy] frames")
    if proto in ("imbalanced", "ablation"):
        if not cfg.data.manifest:
            raise ConfigError(f"protocol {proto!r} requires [data] manifest")
        _exists(cfg, cfg.data.manifest, "[data] manifest")
    if proto == "cross_lingual":
        cl = cfg.cross_lingual
        if not cl.source_manifest or not cl.target_manifests:
            raise ConfigError("protocol 'cross_lingual' requires [cross_lingual] source_manifest and target_manifests")
        for p in (cl.source_manifest, *cl.target_manifests):
            _exists(cfg, p, "[cross_lingual] manifest")
        if cl.eval_fraction + cl.full_fraction > 1 + 1e-9:
            raise ConfigError("[cross_lingual] eval_fraction + full_fraction exceeds 1")
    if cfg.augment.multiplicity < 0:
        raise ConfigError("[augment] multiplicity must be >= 0")
    if cfg.classifier.segment_frames > cfg.model.frames:
        raise ConfigError("[classifier] segment_frames cannot exceed [model] frames")


def _exists(cfg: ExperimentConfig, path: str, what: str):
    if not cfg.resolve(path).exists():
        raise ConfigError(f"{what} not found: {path}")
