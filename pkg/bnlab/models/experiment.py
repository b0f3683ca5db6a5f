"""
Experiment configuration: TOML file with [algorithm] [data] [partition]
[training] [schedule] [output] sections. Every key has a default except the
IDX paths when data.source = "idx".
"""
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import toml

from bnlab.config import (
    ALG_FEDAVG, ALG_FIXBN, ALG_FIXBN_SCAFFOLD, ALGORITHMS, ARCH_MLP, ARCHITECTURES, BN_EPSILON,
    BN_MOMENTUM, DEFAULT_PRECISION, MASTER_SEED, NORMALIZATION_PRESETS, OUTPUT_DIR, PRECISIONS,
    VAR_THRESHOLD_CIFAR, VAR_THRESHOLD_MNIST,
)
from bnlab.exceptions import ConfigError
from bnlab.models.algorithm import AlgorithmSpec, is_centralized
from bnlab.models.dataset import PartitionPlan

SOURCE_SYNTHETIC = "synthetic"
SOURCE_IDX = "idx"

# Short names accepted for sweep axes
AXIS_ALIASES = {
    "p": "partition.p",
    "N": "partition.clients",
    "E": "training.local_steps",
    "B": "training.batch_size",
    "rho": "algorithm.rho",
    "lr": "schedule.base_lr",
    "algorithm": "algorithm.name",
}


@dataclass(frozen=True)
class AlgorithmSection:
    name: str = ALG_FEDAVG
    rho: float = BN_MOMENTUM
    var_threshold: Optional[float] = None  # follows data.normalization when unset
    t_star: Optional[int] = None


@dataclass(frozen=True)
class DataSection:
    source: str = SOURCE_SYNTHETIC
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    normalization: str = "mnist"
    limit: Optional[int] = None            # keep the first N training samples
    classes: int = 10
    samples_per_class: int = 200
    test_samples_per_class: int = 50
    dims: int = 32
    spread: float = 0.8
    scale: float = 1.0
    group_shift: float = 0.0      # feature offset shared by each label half
    image_shape: Optional[List[int]] = None


@dataclass(frozen=True)
class PartitionSection:
    clients: int = 2
    p: float = 0.5
    seed: Optional[int] = None  # derived from the master seed when unset


@dataclass(frozen=True)
class TrainingSection:
    architecture: str = ARCH_MLP
    hidden: int = 64
    local_steps: int = 10
    rounds: Optional[int] = None
    iterations: Optional[int] = 1500
    batch_size: int = 32
    epsilon: float = BN_EPSILON
    precision: str = DEFAULT_PRECISION
    folds: int = 1
    seed: int = MASTER_SEED


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "constant"
    base_lr: float = 0.05
    factor: float = 1.0
    milestones: List[int] = field(default_factory=list)
    warmup_iters: int = 0


@dataclass(frozen=True)
class OutputSection:
    directory: str = OUTPUT_DIR


SECTIONS = {
    "algorithm": AlgorithmSection,
    "data": DataSection,
    "partition": PartitionSection,
    "training": TrainingSection,
    "schedule": ScheduleSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    data: DataSection = field(default_factory=DataSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        a, d, p, t = self.algorithm, self.data, self.partition, self.training
        if a.name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm '{a.name}'", field="algorithm.name")
        if d.source not in (SOURCE_SYNTHETIC, SOURCE_IDX):
            raise ConfigError(f"unknown data source '{d.source}'", field="data.source")
        if d.source == SOURCE_IDX:
            for key in ("train_images", "train_labels"):
                if not getattr(d, key):
                    raise ConfigError("IDX source needs a path", field=f"data.{key}")
            if t.folds < 2 and not (d.test_images and d.test_labels):
                raise ConfigError("single-fold IDX runs need test_images/test_labels", field="data.test_images")
        if a.var_threshold is not None and (isinstance(a.var_threshold, bool)
                                            or not isinstance(a.var_threshold, (int, float))):
            raise ConfigError("expected a number", field="algorithm.var_threshold")
        if d.normalization not in NORMALIZATION_PRESETS:
            raise ConfigError(f"unknown normalization '{d.normalization}'", field="data.normalization")
        if t.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{t.architecture}'", field="training.architecture")
        if t.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}", field="training.precision")
        if t.local_steps < 1:
            raise ConfigError("local_steps must be >= 1", field="training.local_steps")
        if t.batch_size < 2:
            raise ConfigError("batch_size must be >= 2", field="training.batch_size")
        if t.folds < 1:
            raise ConfigError("folds must be >= 1", field="training.folds")
        if t.rounds is None and t.iterations is None:
            raise ConfigError("set rounds or iterations", field="training.iterations")
        if t.rounds is not None and t.iterations is not None and t.rounds * t.local_steps != t.iterations:
            raise ConfigError(f"rounds * local_steps = {t.rounds * t.local_steps} != iterations {t.iterations}",
                              field="training.rounds")
        if self.rounds < 1:
            raise ConfigError("iteration budget is smaller than one global step", field="training.iterations")
        PartitionPlan(p.clients, p.p, 0)
        if not is_centralized(a.name):
            self.algorithm_spec()

    # -- derived values -----------------------------------------------------
    @property
    def rounds(self) -> int:
        t = self.training
        return t.rounds if t.rounds is not None else t.iterations // t.local_steps

    @property
    def iterations(self) -> int:
        return self.rounds * self.training.local_steps

    @property
    def var_threshold(self) -> float:
        if self.algorithm.var_threshold is not None:
            return self.algorithm.var_threshold
        return VAR_THRESHOLD_CIFAR if self.data.normalization == "cifar" else VAR_THRESHOLD_MNIST

    def algorithm_spec(self, name: Optional[str] = None) -> AlgorithmSpec:
        a = self.algorithm
        name = name or a.name
        freezes = name in (ALG_FIXBN, ALG_FIXBN_SCAFFOLD)
        t_star = a.t_star if freezes else None
        if freezes and t_star is None:
            t_star = self.iterations // 2
        return AlgorithmSpec(name, rho=a.rho, var_threshold=self.var_threshold, t_star=t_star,
                             epsilon=self.training.epsilon)

    def with_value(self, dotted: str, value: Any) -> "ExperimentConfig":
        """Copy with one field replaced; value strings are coerced to the field's type."""
        dotted = AXIS_ALIASES.get(dotted, dotted)
        section_name, key = split_field(dotted)
        section = getattr(self, section_name)
        updates = {key: _coerce(dotted, value, getattr(section, key))}
        if dotted == "training.iterations" or (dotted == "training.local_steps"
                                               and self.training.iterations is not None):
            updates["rounds"] = None
        if dotted == "training.rounds":
            updates["iterations"] = None
        return replace(self, **{section_name: replace(section, **updates)})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def split_field(dotted: str) -> Tuple[str, str]:
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown field '{dotted}'", field=dotted)
    names = {f.name for f in fields(SECTIONS[parts[0]])}
    if parts[1] not in names:
        raise ConfigError(f"unknown field '{dotted}'", field=dotted)
    return parts[0], parts[1]


def _coerce(dotted: str, value: Any, current: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if current is None and value.lower() == "none":
            return None
        if current is None:
            for cast in (int, float):
                try:
                    return cast(value)
                except ValueError:
                    continue
    except ValueError as exc:
        raise ConfigError(f"cannot read '{value}': {exc}", field=dotted) from exc
    return value


def _build_section(name: str, raw: Any):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError("expected a table", field=name)
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", field=f"{name}.{key}")
    defaults = cls()
    values = {}
    if name == "training" and "rounds" in raw and "iterations" not in raw:
        values["iterations"] = None
    for key, value in raw.items():
        expected = getattr(defaults, key)
        if isinstance(expected, bool) != isinstance(value, bool):
            raise ConfigError(f"expected {type(expected).__name__}, got {type(value).__name__}", field=f"{name}.{key}")
        if isinstance(expected, float) and isinstance(value, int):
            value = float(value)
        elif expected is not None and not isinstance(value, type(expected)):
            raise ConfigError(f"expected {type(expected).__name__}, got {type(value).__name__}", field=f"{name}.{key}")
        values[key] = value
    return cls(**values)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    for name in raw:
        if name not in SECTIONS:
            raise ConfigError("unknown section", field=name)
    return ExperimentConfig(**{name: _build_section(name, raw[name]) for name in raw})


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = toml.load(path)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc.msg}", line=exc.lineno) from exc
    return config_from_dict(raw)


def dump_config(config: ExperimentConfig) -> str:
    def clean(section):
        return {k: v for k, v in asdict(section).items() if v is not None}
    return toml.dumps({name: clean(getattr(config, name)) for name in SECTIONS})
