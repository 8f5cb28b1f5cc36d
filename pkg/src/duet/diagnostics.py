"""Sign-conflict counts between task vectors and merged-model distance checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensors import (
    NamedTensorMap,
    check_same_keys,
    cosine_similarity,
    l2_norm,
)
from .task_vectors import TaskVector


@dataclass
class TensorSignConflicts:
    conflicts: int
    comparable: int

    @property
    def fraction(self) -> float:
        return self.conflicts / self.comparable if self.comparable else 0.0


@dataclass
class SignConflictReport:
    """Per-tensor and total counts of strictly-opposite nonzero sign pairs."""

    per_tensor: dict[str, TensorSignConflicts] = field(default_factory=dict)

    @property
    def total_conflicts(self) -> int:
        return sum(entry.conflicts for entry in self.per_tensor.values())

    @property
    def total_comparable(self) -> int:
        return sum(entry.comparable for entry in self.per_tensor.values())

    @property
    def total_fraction(self) -> float:
        comparable = self.total_comparable
        return self.total_conflicts / comparable if comparable else 0.0

    def to_dict(self) -> dict:
        return {
            "per_tensor": {
                name: {
                    "conflicts": entry.conflicts,
                    "comparable": entry.comparable,
                    "fraction": entry.fraction,
                }
                for name, entry in self.per_tensor.items()
            },
            "total_conflicts": self.total_conflicts,
            "total_comparable": self.total_comparable,
            "total_fraction": self.total_fraction,
        }


def _as_map(vector: TaskVector | NamedTensorMap) -> NamedTensorMap:
    return vector.deltas if isinstance(vector, TaskVector) else vector


def sign_conflicts(a: TaskVector | NamedTensorMap, b: TaskVector | NamedTensorMap) -> SignConflictReport:
    """Count element pairs with strictly opposite nonzero signs.

    Pairs where either element is zero are excluded from ``comparable``.
    """
    map_a = _as_map(a)
    map_b = _as_map(b)
    check_same_keys(map_a, map_b, "sign_conflicts")
    report = SignConflictReport()
    for name, left in map_a.items():
        right = map_b[name]
        if left.shape != right.shape:
            raise ShapeError(f"tensor {name!r}: shape mismatch {left.shape} vs {right.shape}")
        nonzero = (left != 0) & (right != 0)
        comparable = int(np.count_nonzero(nonzero))
        conflicts = int(np.count_nonzero(nonzero & (np.sign(left) != np.sign(right))))
        report.per_tensor[name] = TensorSignConflicts(conflicts=conflicts, comparable=comparable)
    return report


@dataclass
class MergeDistanceReport:
    """Whole-model L2 distance and cosine similarity of merged vs old/current."""

    l2_to_old: float
    l2_to_curr: float
    cos_to_old: float
    cos_to_curr: float

    def to_dict(self) -> dict:
        return {
            "l2_to_old": self.l2_to_old,
            "l2_to_curr": self.l2_to_curr,
            "cos_to_old": self.cos_to_old,
            "cos_to_curr": self.cos_to_curr,
        }


def _flatten_canonical(tensor_map: NamedTensorMap) -> np.ndarray:
    # Sorted-name order makes the result independent of dict insertion order.
    parts = [
        tensor_map[name].astype(np.float64, copy=False).reshape(-1)
        for name in sorted(tensor_map)
    ]
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts)


def merge_distance(
    merged: NamedTensorMap, old: NamedTensorMap, curr: NamedTensorMap
) -> MergeDistanceReport:
    check_same_keys(merged, old, "merge_distance", "merged", "old")
    check_same_keys(merged, curr, "merge_distance", "merged", "curr")
    for name in merged:
        if merged[name].shape != old[name].shape or merged[name].shape != curr[name].shape:
            raise ShapeError(f"tensor {name!r}: shape mismatch across merged/old/curr")
    flat_merged = _flatten_canonical(merged)
    flat_old = _flatten_canonical(old)
    flat_curr = _flatten_canonical(curr)
    return MergeDistanceReport(
        l2_to_old=l2_norm(flat_merged - flat_old),
        l2_to_curr=l2_norm(flat_merged - flat_curr),
        cos_to_old=cosine_similarity(flat_merged, flat_old),
        cos_to_curr=cosine_similarity(flat_merged, flat_curr),
    )
