"""
Dataset, partition plan and batch schedule models.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from bnlab.exceptions import ConfigError, StructuralError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (num_samples, *input_shape)
    labels: np.ndarray    # int64 class ids
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        features = np.array(self.features, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if features.ndim < 2:
            raise StructuralError(f"features need a sample axis and input dims, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise StructuralError(f"{labels.shape[0] if labels.ndim else 0} labels for {features.shape[0]} samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise StructuralError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(features)):
            raise StructuralError("features must be finite")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count, name or self.name)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.features.astype(dtype), self.labels, self.class_count, self.name)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    @staticmethod
    def concat(parts, name: str = "union") -> "Dataset":
        parts = list(parts)
        if not parts:
            raise StructuralError("cannot concatenate zero datasets")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
            name,
        )


@dataclass(frozen=True)
class PartitionPlan:
    num_clients: int
    probability: float  # chance a sample lands on its label's preferred client
    seed: int = 0
    label_groups: Optional[Dict[int, int]] = field(default=None)  # class -> preferred client

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"need at least one client, got {self.num_clients}", field="partition.clients")
        if not 0.5 <= self.probability <= 1.0:
            raise ConfigError(f"assignment probability must lie in [0.5, 1], got {self.probability}",
                              field="partition.p")
        if self.label_groups is not None:
            bad = {c: k for c, k in self.label_groups.items() if not 0 <= k < self.num_clients}
            if bad:
                raise ConfigError(f"label groups point at unknown clients: {bad}", field="partition.label_groups")

    def preferred_client(self, label: int, class_count: int) -> int:
        if self.label_groups is not None:
            if label not in self.label_groups:
                raise ConfigError(f"label {label} has no preferred client", field="partition.label_groups")
            return self.label_groups[label]
        if self.num_clients == 2:
            return label * 2 // class_count
        return label % self.num_clients


@dataclass(frozen=True)
class BatchSchedule:
    """Per-client mini-batch order, a pure function of (seed, iteration).

    Epoch e visits a fresh permutation drawn from default_rng((seed, e)) in
    n // batch_size full batches; datasets smaller than one batch are used whole.
    """
    seed: int
    size: int
    batch_size: int

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("client dataset is empty", field="partition")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}", field="training.batch_size")

    @property
    def batches_per_epoch(self) -> int:
        return max(1, self.size // self.batch_size)

    @property
    def effective_batch(self) -> int:
        return min(self.size, self.batch_size)

    def indices(self, iteration: int) -> np.ndarray:
        epoch, position = divmod(iteration, self.batches_per_epoch)
        order = np.random.default_rng((self.seed, epoch)).permutation(self.size)
        width = self.effective_batch
        return order[position * width:(position + 1) * width]
