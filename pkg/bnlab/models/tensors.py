"""
Named tensor collections.

A TensorDict is an ordered, read-only mapping name -> ndarray with element-wise
arithmetic. The same container carries model parameters, gradients, BN
statistics vectors (keys "<layer>.mean" / "<layer>.var") and control variates,
so every parameter-shaped operation shares one congruence check.
"""
from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from bnlab.exceptions import StructuralError

Scalar = Union[int, float, np.floating]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class TensorDict:
    __slots__ = ("_items",)

    def __init__(self, items: Union[Dict[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]] = ()):
        pairs = items.items() if isinstance(items, dict) else items
        self._items = OrderedDict((name, _frozen(value)) for name, value in pairs)

    # -- mapping protocol -------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __contains__(self, name: object) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def keys(self) -> List[str]:
        return list(self._items.keys())

    def items(self) -> List[Tuple[str, np.ndarray]]:
        return list(self._items.items())

    def values(self) -> List[np.ndarray]:
        return list(self._items.values())

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._items.items())
        return f"TensorDict({shapes})"

    # -- structure ----------------------------------------------------------
    @property
    def size(self) -> int:
        """Total number of scalar entries."""
        return int(sum(v.size for v in self._items.values()))

    @property
    def dtype(self) -> Optional[np.dtype]:
        for value in self._items.values():
            return value.dtype
        return None

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._items.items()]

    def congruent(self, other: "TensorDict") -> bool:
        return isinstance(other, TensorDict) and self.shapes() == other.shapes()

    def check_congruent(self, other: "TensorDict", what: str = "operands") -> None:
        if not isinstance(other, TensorDict):
            raise StructuralError(f"{what}: expected TensorDict, got {type(other).__name__}")
        if self.shapes() != other.shapes():
            raise StructuralError(
                f"{what} are structurally incongruent: {self.shapes()} vs {other.shapes()}"
            )

    # -- arithmetic -----------------------------------------------------------
    def _zip(self, other: "TensorDict", op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "TensorDict":
        self.check_congruent(other)
        return TensorDict((k, op(v, other[k])) for k, v in self._items.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TensorDict":
        return TensorDict((k, fn(v)) for k, v in self._items.items())

    def __add__(self, other: "TensorDict") -> "TensorDict":
        return self._zip(other, np.add)

    def __sub__(self, other: "TensorDict") -> "TensorDict":
        return self._zip(other, np.subtract)

    def __mul__(self, scalar: Scalar) -> "TensorDict":
        if isinstance(scalar, TensorDict):
            raise StructuralError("element-wise product of two TensorDicts is not supported")
        return self.map(lambda v: v * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: Scalar) -> "TensorDict":
        return self.map(lambda v: v / scalar)

    def __neg__(self) -> "TensorDict":
        return self.map(np.negative)

    # -- helpers -------------------------------------------------------------
    def zeros_like(self) -> "TensorDict":
        return self.map(np.zeros_like)

    def astype(self, dtype) -> "TensorDict":
        return self.map(lambda v: v.astype(dtype))

    def replace(self, updates: Dict[str, np.ndarray]) -> "TensorDict":
        """Copy with some entries swapped; shapes must be preserved."""
        out = []
        for k, v in self._items.items():
            if k in updates:
                new = np.asarray(updates[k])
                if new.shape != v.shape:
                    raise StructuralError(f"replacement for '{k}' has shape {new.shape}, expected {v.shape}")
                out.append((k, new))
            else:
                out.append((k, v))
        unknown = set(updates) - set(self._items)
        if unknown:
            raise StructuralError(f"unknown entries: {sorted(unknown)}")
        return TensorDict(out)

    def select(self, names: Sequence[str]) -> "TensorDict":
        return TensorDict((k, self._items[k]) for k in names)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._items.values())

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in self._items.values())))

    def max_abs_diff(self, other: "TensorDict") -> float:
        self.check_congruent(other)
        worst = 0.0
        for k, v in self._items.items():
            if v.size:
                worst = max(worst, float(np.max(np.abs(v.astype(np.float64) - other[k].astype(np.float64)))))
        return worst

    def equals(self, other: "TensorDict") -> bool:
        """Bit-exact equality."""
        return self.congruent(other) and all(np.array_equal(v, other[k]) for k, v in self._items.items())

    def flat(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._items.values()])


def weighted_sum(trees: Sequence[TensorDict], weights: Sequence[float]) -> TensorDict:
    """Convex combination in fixed order, anchored at the first tree.

    Computes x_0 + sum_i w_i (x_i - x_0); with weights summing to one this is
    sum_i w_i x_i, and identical inputs come back bit-exactly.
    """
    if not trees:
        raise StructuralError("weighted_sum of an empty sequence")
    if len(trees) != len(weights):
        raise StructuralError(f"{len(trees)} trees but {len(weights)} weights")
    anchor = trees[0]
    for tree in trees[1:]:
        anchor.check_congruent(tree, "aggregated trees")
    out = []
    for name, base in anchor.items():
        acc = np.zeros_like(base)
        for tree, weight in zip(trees, weights):
            acc = acc + float(weight) * (tree[name] - base)
        out.append((name, base + acc))
    return TensorDict(out)
