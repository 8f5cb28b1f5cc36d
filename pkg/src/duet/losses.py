"""Directional-consistency loss (with analytic gradient), percentile-masked
distillation losses on raw prediction arrays, and total-loss composition."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint
from .errors import CheckpointFormatError, EmptyInputError, ShapeError
from .tensors import NamedTensorMap, check_same_keys, inner_product
from .task_vectors import TaskVector, _check_bases

GRANULARITIES = ("tensor", "element")


@dataclass(frozen=True)
class DcLossConfig:
    """``granularity`` picks the index set of the alignment sum: one term per
    named tensor (inner product) or one per scalar element.  The only
    supported reduction over terms is a plain sum."""

    granularity: str = "tensor"
    reduction: str = "sum"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )
        if self.reduction != "sum":
            raise ValueError(f"reduction must be 'sum', got {self.reduction!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_distill: float = 0.01
    lambda_dc: float = 0.01

    def __post_init__(self):
        if self.lambda_distill < 0 or self.lambda_dc < 0:
            raise ValueError("loss weights must be non-negative")


def _dc_inputs(
    tau_t: TaskVector, tau_prev: TaskVector, tau_prev2: TaskVector, op: str
) -> list[str]:
    _check_bases(op, tau_t.base_fingerprint, tau_prev, tau_prev2)
    check_same_keys(tau_t.deltas, tau_prev.deltas, op, "tau_t", "tau_prev")
    check_same_keys(tau_t.deltas, tau_prev2.deltas, op, "tau_t", "tau_prev2")
    for name in tau_t.deltas:
        shape = tau_t.deltas[name].shape
        if tau_prev.deltas[name].shape != shape or tau_prev2.deltas[name].shape != shape:
            raise ShapeError(f"tensor {name!r}: shape mismatch across the three task vectors")
    # Sorted iteration makes the reduction independent of dict insertion order.
    return sorted(tau_t.deltas)


def dc_loss(
    tau_t: TaskVector,
    tau_prev: TaskVector,
    tau_prev2: TaskVector,
    config: DcLossConfig | None = None,
) -> float:
    """Penalty on successive update directions that point against each other.

    Sums ``relu(-(d_curr . d_prev))`` where ``d_curr = tau_t - tau_prev`` and
    ``d_prev = tau_prev - tau_prev2``; the dot product runs over whole tensors
    or single elements depending on the configured granularity.
    """
    config = config or DcLossConfig()
    names = _dc_inputs(tau_t, tau_prev, tau_prev2, "dc_loss")
    total = 0.0
    for name in names:
        d_curr = tau_t.deltas[name].astype(np.float64) - tau_prev.deltas[name].astype(np.float64)
        d_prev = tau_prev.deltas[name].astype(np.float64) - tau_prev2.deltas[name].astype(np.float64)
        if config.granularity == "tensor":
            alignment = inner_product(d_curr, d_prev)
            if alignment < 0.0:
                total += -alignment
        else:
            products = d_curr * d_prev
            total += float(-np.sum(products[products < 0.0], dtype=np.float64))
    return total


def dc_loss_grad(
    tau_t: TaskVector,
    tau_prev: TaskVector,
    tau_prev2: TaskVector,
    config: DcLossConfig | None = None,
) -> NamedTensorMap:
    """Gradient of :func:`dc_loss` with respect to ``tau_t``.

    Active terms (negative alignment) contribute ``-d_prev`` on their support;
    at the hinge (alignment exactly zero) the zero subgradient is returned.
    """
    config = config or DcLossConfig()
    _dc_inputs(tau_t, tau_prev, tau_prev2, "dc_loss_grad")
    grad: NamedTensorMap = {}
    for name in tau_t.deltas:
        d_curr = tau_t.deltas[name].astype(np.float64) - tau_prev.deltas[name].astype(np.float64)
        d_prev = tau_prev.deltas[name].astype(np.float64) - tau_prev2.deltas[name].astype(np.float64)
        if config.granularity == "tensor":
            alignment = inner_product(d_curr, d_prev)
            layer_grad = -d_prev if alignment < 0.0 else np.zeros_like(d_prev)
        else:
            active = (d_curr * d_prev) < 0.0
            layer_grad = np.where(active, -d_prev, 0.0)
        layer_grad.flags.writeable = False
        grad[name] = layer_grad
    return grad


def percentile_75(values) -> float:
    """75th percentile with linear interpolation between order statistics."""
    data = np.asarray(values, dtype=np.float64).reshape(-1)
    if data.size == 0:
        raise EmptyInputError("percentile of an empty value list is undefined")
    if not np.isfinite(data).all():
        raise ValueError("percentile input must be finite")
    ordered = np.sort(data)
    position = (ordered.size - 1) * 0.75
    lower = int(position)
    if lower == ordered.size - 1:
        return float(ordered[lower])
    fraction = position - lower
    return float(ordered[lower] + fraction * (ordered[lower + 1] - ordered[lower]))


@dataclass
class PredictionBatch:
    """Raw detector outputs: one row of class logits per prediction and one
    row of box coordinates per box."""

    class_logits: np.ndarray
    bbox_values: np.ndarray

    def __post_init__(self):
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64)
        self.bbox_values = np.asarray(self.bbox_values, dtype=np.float64)
        if self.class_logits.ndim != 2:
            raise ShapeError(f"class_logits must be 2-d, got shape {self.class_logits.shape}")
        if self.bbox_values.ndim != 2:
            raise ShapeError(f"bbox_values must be 2-d, got shape {self.bbox_values.shape}")
        if self.class_logits.shape[0] > 0 and self.class_logits.shape[1] < 1:
            raise ShapeError("class_logits needs at least one class column")
        if self.bbox_values.shape[1] < 2:
            raise ShapeError(
                f"bbox_values needs at least 2 coordinates per box, got {self.bbox_values.shape[1]}"
            )
        for label, arr in (("class_logits", self.class_logits), ("bbox_values", self.bbox_values)):
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"{label} contains non-finite values")


def load_prediction_batch(path: str | Path) -> PredictionBatch:
    """Load a batch from JSON or from the binary tensor container."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"{path}: malformed prediction JSON: {exc}") from exc
        if not isinstance(payload, dict) or not {"class_logits", "bbox_values"} <= set(payload):
            raise CheckpointFormatError(
                f"{path}: prediction JSON must carry 'class_logits' and 'bbox_values'"
            )
        return PredictionBatch(payload["class_logits"], payload["bbox_values"])
    tensors, _ = read_checkpoint(path)
    missing = sorted({"class_logits", "bbox_values"} - set(tensors))
    if missing:
        raise CheckpointFormatError(f"{path}: prediction container is missing {missing}")
    return PredictionBatch(tensors["class_logits"], tensors["bbox_values"])


def _check_batch_pair(curr: np.ndarray, old: np.ndarray, what: str):
    if curr.shape != old.shape:
        raise ShapeError(f"{what}: shape mismatch {curr.shape} vs {old.shape}")


def distill_cls_loss(curr: PredictionBatch, old: PredictionBatch) -> tuple[float, int]:
    """Mean squared L2 gap over rows whose old max-logit clears the 75th
    percentile threshold; empty batches give (0, 0)."""
    _check_batch_pair(curr.class_logits, old.class_logits, "class_logits")
    n = old.class_logits.shape[0]
    if n == 0:
        return 0.0, 0
    row_max = np.max(old.class_logits, axis=1)
    threshold = percentile_75(row_max)
    mask = row_max >= threshold
    mask_size = int(np.count_nonzero(mask))
    if mask_size == 0:
        return 0.0, 0
    diff = curr.class_logits[mask] - old.class_logits[mask]
    per_row = np.sum(diff * diff, axis=1, dtype=np.float64)
    return float(np.sum(per_row, dtype=np.float64) / mask_size), mask_size


def _row_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - np.max(rows, axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=1, keepdims=True)


def distill_bbox_loss(curr: PredictionBatch, old: PredictionBatch) -> tuple[float, int]:
    """Mean KL(softmax(curr row) || softmax(old row)) over rows whose old-box
    population variance is at or below the 75th percentile threshold."""
    _check_batch_pair(curr.bbox_values, old.bbox_values, "bbox_values")
    m = old.bbox_values.shape[0]
    if m == 0:
        return 0.0, 0
    variances = np.var(old.bbox_values, axis=1)  # population variance: divide by K
    threshold = percentile_75(variances)
    mask = variances <= threshold
    mask_size = int(np.count_nonzero(mask))
    if mask_size == 0:
        return 0.0, 0
    p = _row_softmax(curr.bbox_values[mask])
    q = _row_softmax(old.bbox_values[mask])
    kl_rows = np.sum(p * (np.log(p) - np.log(q)), axis=1, dtype=np.float64)
    return float(np.sum(kl_rows, dtype=np.float64) / mask_size), mask_size


@dataclass
class DistillResult:
    cls_loss: float
    cls_mask_size: int
    bbox_loss: float
    bbox_mask_size: int

    @property
    def total(self) -> float:
        return self.cls_loss + self.bbox_loss

    def to_dict(self) -> dict:
        return {
            "cls_loss": self.cls_loss,
            "cls_mask_size": self.cls_mask_size,
            "bbox_loss": self.bbox_loss,
            "bbox_mask_size": self.bbox_mask_size,
            "total": self.total,
        }


def distill_loss(curr: PredictionBatch, old: PredictionBatch) -> DistillResult:
    cls_loss, cls_mask = distill_cls_loss(curr, old)
    bbox_loss, bbox_mask = distill_bbox_loss(curr, old)
    return DistillResult(cls_loss, cls_mask, bbox_loss, bbox_mask)


def total_loss(
    detector_loss: float,
    distill: float,
    dc: float,
    weights: LossWeights | None = None,
    task_index: int = 1,
) -> float:
    """Detector loss alone on the base task; weighted sum afterwards."""
    if task_index < 1:
        raise ValueError(f"task_index must be >= 1, got {task_index}")
    weights = weights or LossWeights()
    if task_index == 1:
        return float(detector_loss)
    return float(detector_loss) + weights.lambda_distill * float(distill) + weights.lambda_dc * float(dc)
