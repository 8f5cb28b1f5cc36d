"""Bundled offline fixtures: packaged metric records and a deterministic
synthetic checkpoint trio for self-tests and CLI examples."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from ..checkpoint import PartitionSpec, write_checkpoint
from ..tensors import NamedTensorMap

METRIC_METHODS = ("sequential_ft", "lwf", "erd", "ldb", "cl_detr", "duet")

_TRIO_SEED = 20240517


def metrics_dir() -> Path:
    return Path(resources.files(__package__) / "metrics")


def protocol_path() -> Path:
    return metrics_dir() / "protocol_weather_two_phase.json"


def records_path(method: str) -> Path:
    if method not in METRIC_METHODS:
        raise ValueError(f"unknown fixture method {method!r}; expected one of {METRIC_METHODS}")
    return metrics_dir() / f"records_{method}.jsonl"


def expected_metrics_path() -> Path:
    return metrics_dir() / "expected.json"


def example_partition_path() -> Path:
    return Path(resources.files(__package__) / "yolo_partition.json")


def synthetic_partition() -> PartitionSpec:
    return PartitionSpec(
        shared_patterns=("backbone.*", "neck.*"),
        task_specific_patterns=("head.*",),
        head_concat_axis=0,
        replace_patterns=("head.stem.*",),
    )


def _random_map(rng: np.random.Generator, head_classes: int) -> NamedTensorMap:
    def draw(*shape) -> np.ndarray:
        arr = rng.normal(0.0, 0.25, size=shape).astype(np.float32)
        arr.flags.writeable = False
        return arr

    return {
        "backbone.conv1.weight": draw(16, 8),
        "backbone.conv1.bias": draw(16),
        "neck.fuse.weight": draw(12, 16),
        "head.stem.weight": draw(12, 12),
        "head.cls.weight": draw(head_classes, 12),
    }


def synthetic_trio() -> tuple[NamedTensorMap, list[NamedTensorMap], PartitionSpec]:
    """Five-tensor base model plus two fine-tuned descendants, fixed seed.

    The two fine-tuned checkpoints introduce 4 and 3 head classes; the head
    stem keeps its shape and is flagged ``replace`` in the partition.
    """
    rng = np.random.default_rng(_TRIO_SEED)
    base = _random_map(rng, head_classes=4)
    fine_tuned = []
    for head_classes in (4, 3):
        drift = _random_map(rng, head_classes=head_classes)
        model: NamedTensorMap = {}
        for name, delta in drift.items():
            if name in base and base[name].shape == delta.shape:
                arr = (base[name] + 0.2 * delta).astype(np.float32)
            else:
                arr = delta.astype(np.float32)
            arr.flags.writeable = False
            model[name] = arr
        fine_tuned.append(model)
    return base, fine_tuned, synthetic_partition()


def materialize_trio(directory: str | Path) -> dict[str, Path]:
    """Write the synthetic trio and its partition manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base, fine_tuned, spec = synthetic_trio()
    paths = {
        "base": directory / "base.safetensors",
        "task1": directory / "task1.safetensors",
        "task2": directory / "task2.safetensors",
        "partition": directory / "partition.json",
    }
    write_checkpoint(base, paths["base"])
    write_checkpoint(fine_tuned[0], paths["task1"])
    write_checkpoint(fine_tuned[1], paths["task2"])
    paths["partition"].write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths
