"""YAML experiment configuration: schema, overrides and resolution.

Every section maps onto a frozen dataclass. Unknown keys anywhere are rejected so a
typo in a hyperparameter name fails the run instead of silently using a default.
"""

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml
from loguru import logger

from isda_lab.errors import ConfigError, IsdaError
from isda_lab.losses import AugmentationConfig, SemiWeights
from isda_lab.training import SgdConfig, TrainConfig

SCHEMA_VERSION = 1
DEFAULT_LAMBDA_GRID = [0.1, 0.25, 0.5, 0.75, 1.0]
DEFAULT_M_GRID = [1, 2, 5, 10, 100]


@dataclass(frozen=True)
class DataSection:
    """``kind`` is ``synthetic`` or ``records``; record files are read when set."""

    kind: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    covariance: str = "anisotropic"
    variance: float = 1.0
    dominant: float = 4.0
    floor: float = 0.05
    separation: float = 3.0
    data_seed: int = 1234
    train_files: list[str] = field(default_factory=list)
    test_files: list[str] = field(default_factory=list)
    height: int = 32
    width: int = 32
    channels: int = 3

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "records"):
            raise ConfigError(f"data.kind must be synthetic or records, got {self.kind!r}")
        if self.covariance not in ("anisotropic", "isotropic"):
            raise ConfigError(
                f"data.covariance must be anisotropic or isotropic, got {self.covariance!r}"
            )
        if self.kind == "records" and not self.train_files:
            raise ConfigError("data.train_files is required when data.kind is records")


@dataclass(frozen=True)
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 32
    slope: float = 0.1
    activate_features: bool = True


@dataclass(frozen=True)
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1


@dataclass(frozen=True)
class AugmentationSection:
    lambda0: float = 0.5
    schedule: str = "linear"
    cov_mode: str = "full"


@dataclass(frozen=True)
class SemiSection:
    num_labeled: int = 200
    eta1: float = 1.0
    eta2: float = 0.0
    unlabeled_batch_size: int | None = None
    confidence_threshold: float | None = None
    pi_noise_std: float = 0.15
    validation_fraction: float = 0.25
    merge_validation: bool = False


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    objective: str = "isda"
    last_k: int = 10
    geometric_augment: bool = False
    save_checkpoint: bool = True


@dataclass(frozen=True)
class OracleSection:
    """Monte-Carlo settings for bound verification and the explicit objective."""

    mc_samples: int = 1000
    bound_batch: int = 256
    explicit_m: int = 10
    stderr_z: float = 3.0

    def __post_init__(self) -> None:
        if self.mc_samples < 2:
            raise ConfigError(f"oracle.mc_samples must be >= 2, got {self.mc_samples}")
        if self.bound_batch < 1:
            raise ConfigError(f"oracle.bound_batch must be >= 1, got {self.bound_batch}")


@dataclass(frozen=True)
class SweepSection:
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    m_values: list[int] = field(default_factory=lambda: list(DEFAULT_M_GRID))
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    semi: SemiSection = field(default_factory=SemiSection)
    train: TrainSection = field(default_factory=TrainSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def train_config(self) -> TrainConfig:
        """Trainer settings; raises ConfigError when a value is out of range."""
        try:
            return TrainConfig(
                epochs=self.train.epochs,
                batch_size=self.train.batch_size,
                seed=self.train.seed,
                augmentation=AugmentationConfig(
                    lambda0=self.augmentation.lambda0,
                    schedule=self.augmentation.schedule,
                    cov_mode=self.augmentation.cov_mode,
                ),
                semi=SemiWeights(self.semi.eta1, self.semi.eta2),
                sgd=SgdConfig(
                    lr=self.optim.lr,
                    momentum=self.optim.momentum,
                    weight_decay=self.optim.weight_decay,
                    milestones=tuple(self.optim.milestones),
                    gamma=self.optim.gamma,
                ),
                objective=self.train.objective,
                explicit_m=self.oracle.explicit_m,
                last_k=self.train.last_k,
                unlabeled_batch_size=self.semi.unlabeled_batch_size,
                confidence_threshold=self.semi.confidence_threshold,
                pi_noise_std=self.semi.pi_noise_std,
                geometric_augment=self.train.geometric_augment,
            )
        except (IsdaError, ValueError) as exc:
            raise ConfigError(f"invalid training settings: {exc}") from exc


def _check_type(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        inner = [o for o in options if o is not type(None)]
        return _check_type(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        (item,) = typing.get_args(hint)
        return [_check_type(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, str):
            # PyYAML reads exponents without a dot, such as 1e-4, as strings.
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        path = f"{where}.{name}" if where else name
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        else:
            kwargs[name] = _check_type(value, hint, path)
    return cls(**kwargs)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw mapping against the schema.

    Raises:
        ConfigError: Missing or wrong ``schema_version``, unknown keys or bad types.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    config = _build(ExperimentConfig, raw, "")
    config.train_config()
    return config


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value``; the value is parsed as YAML so numbers and lists type."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {value!r}: {exc}") from exc
    return key.strip().split("."), parsed


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Set single leaves of ``raw`` (in place); every path must already exist."""
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            child = node.get(part) if isinstance(node, dict) else None
            if not isinstance(child, dict):
                raise ConfigError(f"unknown override path {'.'.join(path)}")
            node = child
        if path[-1] not in node or isinstance(node[path[-1]], dict):
            raise ConfigError(f"unknown override path {'.'.join(path)}")
        node[path[-1]] = value
        logger.debug("Override {} = {!r}", ".".join(path), value)
    return raw


def _merge(base: dict[str, Any], update: dict[str, Any], where: str) -> dict[str, Any]:
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a mapping")
            _merge(base[key], value, path)
        else:
            base[key] = value
    return base


def read_config_file(path: Path) -> dict[str, Any]:
    """
    Raw mapping from a YAML config, a resolved config or a run's ``summary.json``
    (whose embedded ``config`` is used).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            data = json.loads(text)
            data = data.get("config", data) if isinstance(data, dict) else data
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a mapping")
    return data


def load_config(
    path: Path | None = None,
    overrides: list[str] | None = None,
    *,
    seed: int | None = None,
) -> ExperimentConfig:
    """
    Defaults, then the file at ``path``, then ``key=value`` overrides, then ``seed``.

    A file without ``schema_version: 1`` is rejected.
    """
    raw = ExperimentConfig().to_dict()
    if path is not None:
        file_raw = read_config_file(path)
        if file_raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"{path}: schema_version must be {SCHEMA_VERSION}, "
                f"got {file_raw.get('schema_version')!r}"
            )
        _merge(raw, file_raw, "")
    apply_overrides(raw, list(overrides or []))
    if seed is not None:
        raw["train"]["seed"] = seed
    return from_dict(raw)


def write_resolved(config: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path
