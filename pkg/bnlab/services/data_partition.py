"""
Dataset providers and the label-skew partitioner.
Supports IDX digit images, seeded Gaussian-cluster data (with a flat binary
format) and k-fold splitting.
"""
import logging
import struct
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import KFold

from bnlab.config import DATA_DIR, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, NORMALIZATION_PRESETS
from bnlab.exceptions import ConfigError, FormatError
from bnlab.models.dataset import Dataset, PartitionPlan

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SYNTHETIC_MAGIC = b"BNSY"
SYNTHETIC_VERSION = 1


# ---------------------------------------------------------------------------
# Label-skew partition
# ---------------------------------------------------------------------------

def partition_label_skew(data: Dataset, plan: PartitionPlan) -> List[Dataset]:
    """Send each sample to its label's preferred client with probability p, else uniformly to another."""
    n, N = len(data), plan.num_clients
    rng = np.random.default_rng(plan.seed)
    preferred = np.array([plan.preferred_client(int(y), data.class_count) for y in data.labels], dtype=np.int64)
    stay = rng.random(n) < plan.probability
    if N > 1:
        other = rng.integers(0, N - 1, size=n)
        other = other + (other >= preferred)
    else:
        other = preferred
    owner = np.where(stay, preferred, other)
    parts = [data.subset(np.flatnonzero(owner == client), name=f"{data.name}[client {client}]") for client in range(N)]
    for client, part in enumerate(parts):
        logger.debug("client %d: %d samples, histogram %s", client, len(part), part.class_histogram().tolist())
    return parts


def client_probabilities(datasets: Sequence[Dataset]) -> List[Fraction]:
    """P_i = |D_i| / sum_j |D_j|, exact."""
    total = sum(len(d) for d in datasets)
    if total == 0:
        raise ConfigError("all client datasets are empty", field="partition")
    return [Fraction(len(d), total) for d in datasets]


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_header(raw: bytes, magic: int, dims: int, path: PathLike) -> Tuple[int, ...]:
    need = 4 + 4 * dims
    if len(raw) < 4:
        raise FormatError(f"{path}: missing magic number", offset=len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < need:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    return struct.unpack(f">{dims}I", raw[4:need])


def _read_payload(raw: bytes, offset: int, count: int, path: PathLike) -> np.ndarray:
    end = offset + count
    if len(raw) < end:
        raise FormatError(f"{path}: truncated payload, expected {count} bytes", offset=len(raw))
    if len(raw) > end:
        raise FormatError(f"{path}: {len(raw) - end} trailing bytes", offset=end)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def normalize(features: np.ndarray, preset: str) -> np.ndarray:
    if preset not in NORMALIZATION_PRESETS:
        raise ConfigError(f"unknown normalization '{preset}'", field="data.normalization")
    mean, std = (np.asarray(v, dtype=np.float64) for v in NORMALIZATION_PRESETS[preset])
    if features.ndim == 4 and mean.size == features.shape[1]:
        shape = (1, -1, 1, 1)
    else:
        mean, std = mean[:1], std[:1]
        shape = (1,) * features.ndim
    return (features - mean.reshape(shape)) / std.reshape(shape)


def resolve_data_path(path: PathLike) -> Path:
    """Paths that do not exist as given are looked up under the data directory."""
    path = Path(path)
    if path.is_absolute() or path.exists():
        return path
    return Path(DATA_DIR) / path


def load_idx(images_path: PathLike, labels_path: PathLike, normalization: str = "mnist",
             class_count: int = 10, limit: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair into (N, 1, rows, cols) features scaled to [0, 1] then standardized."""
    images_path, labels_path = resolve_data_path(images_path), resolve_data_path(labels_path)
    images_raw = Path(images_path).read_bytes()
    labels_raw = Path(labels_path).read_bytes()
    count, rows, cols = _read_header(images_raw, IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,) = _read_header(labels_raw, IDX_LABELS_MAGIC, 1, labels_path)
    if label_count != count:
        raise FormatError(f"{labels_path}: {label_count} labels for {count} images", offset=4)
    pixels = _read_payload(images_raw, 16, count * rows * cols, images_path)
    labels = _read_payload(labels_raw, 8, count, labels_path)
    if labels.size and int(labels.max()) >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise FormatError(f"{labels_path}: label {int(labels[bad])} outside [0, {class_count})", offset=8 + bad)
    features = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    features = normalize(features, normalization)
    labels = labels.astype(np.int64)
    if limit is not None:
        features, labels = features[:limit], labels[:limit]
    logger.info("Loaded %d IDX samples (%dx%d) from %s", len(labels), rows, cols, images_path)
    return Dataset(features, labels, class_count, name=Path(images_path).name)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path: PathLike, labels_path: PathLike) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise FormatError(f"cannot write images {images.shape} with labels {labels.shape}", offset=0)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n) + labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic clusters
# ---------------------------------------------------------------------------

def simplex_means(classes: int, dims: int, scale: float = 1.0) -> np.ndarray:
    """Vertices of a regular simplex centred at the origin, unit radius times scale."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}", field="data.classes")
    if dims < classes - 1:
        raise ConfigError(f"{classes} classes need at least {classes - 1} dims, got {dims}", field="data.dims")
    centred = np.eye(classes) - 1.0 / classes
    _, _, vt = np.linalg.svd(centred)
    coords = centred @ vt[: classes - 1].T
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    means = np.zeros((classes, dims))
    means[:, : classes - 1] = coords * scale
    return means


def gen_synthetic(classes: int, samples_per_class: int, dims: int, cluster_spread: float, seed: int,
                  scale: float = 1.0, shape: Optional[Sequence[int]] = None, name: str = "synthetic",
                  group_shift: float = 0.0) -> Dataset:
    """Isotropic Gaussian clusters around simplex vertices, shuffled with the seed.

    A non-zero ``group_shift`` moves the lower label half by +shift and the upper half by -shift along
    the first axis the simplex does not use, so a label-skewed client also sees shifted feature moments.
    """
    if samples_per_class < 1 or dims < 1:
        raise ConfigError("synthetic data needs positive counts", field="data.samples_per_class")
    if cluster_spread < 0:
        raise ConfigError(f"cluster_spread must be >= 0, got {cluster_spread}", field="data.spread")
    rng = np.random.default_rng(seed)
    means = simplex_means(classes, dims, scale)
    if group_shift:
        if dims < classes:
            raise ConfigError(f"group_shift needs at least {classes} dims, got {dims}", field="data.dims")
        halves = np.arange(classes) * 2 // classes
        means[:, classes - 1] = np.where(halves == 0, group_shift, -group_shift)
    labels = np.repeat(np.arange(classes), samples_per_class)
    noise = rng.standard_normal((labels.size, dims))
    features = means[labels] + cluster_spread * noise
    order = rng.permutation(labels.size)
    features, labels = features[order], labels[order]
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != dims:
            raise ConfigError(f"shape {shape} does not hold {dims} dims", field="data.image_shape")
        features = features.reshape((labels.size,) + shape)
    return Dataset(features, labels, classes, name=name)


def save_synthetic(dataset: Dataset, path: PathLike) -> None:
    """Header (magic, version, n, classes, ndim, dims...) then float64 features and uint8 labels, big-endian."""
    if dataset.class_count > 256:
        raise FormatError("labels do not fit in one byte", offset=0)
    dims = dataset.input_shape
    header = SYNTHETIC_MAGIC + struct.pack(f">4I{len(dims)}I", SYNTHETIC_VERSION, len(dataset),
                                           dataset.class_count, len(dims), *dims)
    body = dataset.features.astype(">f8").tobytes() + dataset.labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def load_synthetic(path: PathLike) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != SYNTHETIC_MAGIC:
        raise FormatError(f"{path}: not a synthetic dataset file", offset=0)
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    version, n, classes, ndim = struct.unpack(">4I", raw[4:20])
    if version != SYNTHETIC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    dims_end = 20 + 4 * ndim
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[20:dims_end])
    feature_bytes = 8 * n * int(np.prod(dims))
    end = dims_end + feature_bytes + n
    if len(raw) != end:
        raise FormatError(f"{path}: expected {end} bytes, found {len(raw)}", offset=min(len(raw), end))
    features = np.frombuffer(raw, dtype=">f8", count=feature_bytes // 8, offset=dims_end)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=dims_end + feature_bytes)
    return Dataset(features.astype(np.float64).reshape((n,) + tuple(dims)), labels.astype(np.int64), classes,
                   name=Path(path).stem)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def kfold_splits(size: int, folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(train, validation) index pairs: contiguous blocks after one seeded shuffle."""
    if folds < 2:
        raise ConfigError(f"k-fold needs at least 2 folds, got {folds}", field="training.folds")
    if size < folds:
        raise ConfigError(f"{size} samples cannot fill {folds} folds", field="training.folds")
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    return [(train, valid) for train, valid in splitter.split(np.arange(size))]
