from __future__ import annotations

import numpy as np
import pytest

from duet.checkpoint import PartitionSpec, fingerprint_map


def make_map(rng: np.random.Generator, n_tensors: int, max_elems: int = 64, dtype=np.float64) -> dict:
    out = {}
    for i in range(n_tensors):
        size = int(rng.integers(1, max_elems))
        out[f"layer_{i:02d}"] = rng.normal(0.0, 1.0, size=size).astype(dtype)
    return out


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def simple_spec() -> PartitionSpec:
    return PartitionSpec(
        shared_patterns=("backbone.*", "neck.*"),
        task_specific_patterns=("head.*",),
        head_concat_axis=0,
    )


@pytest.fixture
def fingerprinted_base(rng):
    base = {
        "backbone.w": rng.normal(size=(6, 4)).astype(np.float32),
        "backbone.b": rng.normal(size=6).astype(np.float32),
        "neck.w": rng.normal(size=(5, 6)).astype(np.float32),
    }
    return base, fingerprint_map(base)
