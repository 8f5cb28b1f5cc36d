"""Offline self-test over the bundled fixture pack.

Mirrors the repository's acceptance suite in a dependency-free form so a
deployed install can be checked with ``duet --self-test``: merge output
against a direct formula evaluation, coefficient invariants, the bundled
benchmark metric rows, the directional-consistency gradient against finite
differences, distillation edge cases, container roundtrips, and CLI
determinism across reruns and thread counts.
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import parse_checkpoint, serialize_checkpoint, fingerprint_map
from .fixtures import (
    METRIC_METHODS,
    expected_metrics_path,
    materialize_trio,
    protocol_path,
    records_path,
)
from .losses import (
    DcLossConfig,
    PredictionBatch,
    dc_loss,
    dc_loss_grad,
    distill_bbox_loss,
    distill_cls_loss,
    percentile_75,
)
from .merge import MergeConfig, duet_merge
from .metrics import compute_metrics, load_protocol, load_records
from .task_vectors import TaskVector

# Canonical serialization of a fixed reference map; guards byte-level format
# stability across platforms.
_REFERENCE_FINGERPRINT = "de9bc8adefafeceb4e682593b8bdfe04ce1ad4d757eda03e2a2333d6502eafba"


def _random_shared(rng: np.random.Generator, n_tensors: int, max_elems: int) -> dict:
    shared = {}
    for i in range(n_tensors):
        size = int(rng.integers(4, max_elems))
        arr = rng.normal(0.0, 1.0, size=size)
        arr.flags.writeable = False
        shared[f"layer_{i:02d}"] = arr
    return shared


def _direct_merge_formula(base, old, curr, cfg):
    """Straight-line evaluation of the merge equations, kept independent of
    the production code path."""
    out = {}
    coeffs = {}
    for name in base:
        n_old = float(np.abs(old[name]).sum())
        n_curr = float(np.abs(curr[name]).sum())
        n_sum = float(np.abs(old[name] + curr[name]).sum())
        p = (n_old - n_curr) / (n_sum + cfg.epsilon)
        alpha = cfg.alpha_base + max(-cfg.gamma, min(cfg.gamma, cfg.gamma * math.tanh(p)))
        beta = 1.0 - alpha
        out[name] = base[name] + alpha * old[name] + beta * curr[name]
        coeffs[name] = (p, alpha, beta)
    return out, coeffs


def _check_merge_oracle(instances: int = 10) -> str | None:
    rng = np.random.default_rng(7)
    for _ in range(instances):
        base = _random_shared(rng, int(rng.integers(3, 8)), 2000)
        old = {k: rng.normal(0, 1, v.shape) for k, v in base.items()}
        curr = {k: rng.normal(0, 1, v.shape) for k, v in base.items()}
        fp = fingerprint_map(base)
        cfg = MergeConfig()
        merged, report = duet_merge(
            base, fp, TaskVector(old, fp, "old"), TaskVector(curr, fp, "curr"), cfg
        )
        expected, coeffs = _direct_merge_formula(base, old, curr, cfg)
        for record in report.layers:
            name = record.layer_name
            scale = np.maximum(np.abs(expected[name]), 1.0)
            if np.max(np.abs(merged[name] - expected[name]) / scale) > 1e-9:
                return f"merged layer {name} deviates from the direct formula"
            if not (record.alpha + record.beta == 1.0):
                return f"layer {name}: alpha+beta != 1"
            if not (cfg.alpha_base - cfg.gamma <= record.alpha <= cfg.alpha_base + cfg.gamma):
                return f"layer {name}: alpha outside [alpha_base-gamma, alpha_base+gamma]"
            if abs(record.delta - cfg.gamma * math.tanh(record.p)) > 1e-12:
                return f"layer {name}: delta != gamma*tanh(p)"
        # equal vectors keep the base coefficient exactly
        same = TaskVector(old, fp, "same")
        _, eq_report = duet_merge(base, fp, same, same, cfg)
        if any(record.alpha != cfg.alpha_base for record in eq_report.layers):
            return "equal-vector merge moved alpha off alpha_base"
    return None


def _check_metrics_fixture() -> str | None:
    protocol = load_protocol(protocol_path())
    expected = json.loads(expected_metrics_path().read_text(encoding="utf-8"))
    for method in METRIC_METHODS:
        report = compute_metrics(protocol, load_records(records_path(method)))
        want = expected[method]
        if abs(report.avg_ri - want["avg_ri"]) > 0.02:
            return f"{method}: Avg RI {report.avg_ri:.4f} vs published {want['avg_ri']}"
        if abs(report.avg_gi - want["avg_gi"]) > 0.02:
            return f"{method}: Avg GI {report.avg_gi:.4f} vs published {want['avg_gi']}"
        if abs(report.rai - want["rai"]) > 0.02:
            return f"{method}: RAI {report.rai:.4f} vs published {want['rai']}"
    return None


def _check_dc_gradient(instances: int = 3) -> str | None:
    rng = np.random.default_rng(11)
    cfg = DcLossConfig()
    for _ in range(instances):
        shapes = {f"t{i}": int(rng.integers(3, 9)) for i in range(3)}
        fp = "selftest"

        def vec():
            return TaskVector({k: rng.normal(0, 1, n) for k, n in shapes.items()}, fp)

        tau_t, tau_prev, tau_prev2 = vec(), vec(), vec()
        grad = dc_loss_grad(tau_t, tau_prev, tau_prev2, cfg)
        h = 1e-5

        def loss_with_bump(name: str, idx: int, bump: float) -> float:
            bumped = {k: v.copy() for k, v in tau_t.deltas.items()}
            bumped[name][idx] += bump
            return dc_loss(TaskVector(bumped, fp), tau_prev, tau_prev2, cfg)

        for name in tau_t.deltas:
            for idx in range(shapes[name]):
                fd = (loss_with_bump(name, idx, h) - loss_with_bump(name, idx, -h)) / (2 * h)
                analytic = grad[name][idx]
                denom = max(abs(fd), abs(analytic), 1e-8)
                if abs(fd - analytic) / denom > 1e-4:
                    return f"gradient mismatch at {name}[{idx}]: fd={fd} analytic={analytic}"
    return None


def _check_distillation() -> str | None:
    threshold = percentile_75([0.1, 0.2, 0.3, 0.9])
    if abs(threshold - 0.45) > 1e-9:
        return f"75th percentile of the reference list is {threshold}, expected 0.45"
    old = PredictionBatch([[0.1], [0.2], [0.3], [0.9]], [[0.0, 0.0]])
    curr = PredictionBatch([[0.1], [0.2], [0.3], [1.9]], [[0.0, 0.0]])
    loss, mask = distill_cls_loss(curr, old)
    if mask != 1 or abs(loss - 1.0) > 1e-12:
        return f"percentile mask fixture gave loss={loss}, mask={mask}"
    same = PredictionBatch([[0.5, 1.0]], [[0.25, -0.5, 1.0]])
    if distill_cls_loss(same, same)[0] != 0.0 or distill_bbox_loss(same, same)[0] != 0.0:
        return "identical batches should give exactly zero losses"
    return None


def _check_serialization(iterations: int = 200) -> str | None:
    reference = {
        "a": np.array([[1, 2], [3, 4]], dtype=np.float32),
        "b": np.array([0.5, -0.25], dtype=np.float64),
        "empty": np.zeros((0, 3), dtype=np.float32),
        "scalar": np.array(7.0, dtype=np.float64),
    }
    if fingerprint_map(reference) != _REFERENCE_FINGERPRINT:
        return "canonical fingerprint of the reference map changed"
    rng = np.random.default_rng(3)
    for _ in range(iterations):
        tensor_map = {}
        for i in range(int(rng.integers(1, 5))):
            dtype = np.float32 if rng.integers(2) else np.float64
            tensor_map[f"t{i}"] = rng.normal(0, 1, int(rng.integers(0, 64))).astype(dtype)
        blob = serialize_checkpoint(tensor_map)
        parsed, _ = parse_checkpoint(blob)
        if serialize_checkpoint(parsed) != blob:
            return "write/read roundtrip is not byte-identical"
    return None


def _check_cli_determinism() -> str | None:
    from . import cli

    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        paths = materialize_trio(tmp_path / "trio")

        def run(argv) -> bytes:
            buffer = io.StringIO()
            with contextlib.redirect_stdout(buffer):
                code = cli.main(argv)
            if code != 0:
                raise RuntimeError(f"self-test CLI call failed ({code}): {argv}")
            return buffer.getvalue().encode()

        outputs = []
        for threads in ("1", "2", "1"):
            out_dir = tmp_path / "run"
            if out_dir.exists():
                shutil.rmtree(out_dir)
            out_dir.mkdir()
            run(
                [
                    "task-vector",
                    str(paths["base"]),
                    str(paths["task1"]),
                    "--partition",
                    str(paths["partition"]),
                    "--label",
                    "old",
                    "--output",
                    str(out_dir / "tv_old"),
                ]
            )
            run(
                [
                    "task-vector",
                    str(paths["base"]),
                    str(paths["task2"]),
                    "--partition",
                    str(paths["partition"]),
                    "--label",
                    "curr",
                    "--output",
                    str(out_dir / "tv_curr"),
                ]
            )
            stdout = run(
                [
                    "merge",
                    "duet",
                    str(paths["base"]),
                    "--old",
                    str(out_dir / "tv_old"),
                    "--curr",
                    str(out_dir / "tv_curr"),
                    "--threads",
                    threads,
                    "--output",
                    str(out_dir / "merged.safetensors"),
                    "--report",
                    str(out_dir / "report.json"),
                ]
            )
            outputs.append(
                (
                    stdout,
                    (out_dir / "merged.safetensors").read_bytes(),
                    (out_dir / "report.json").read_bytes(),
                    (out_dir / "tv_old" / "deltas.safetensors").read_bytes(),
                )
            )
        if not (outputs[0] == outputs[1] == outputs[2]):
            return "CLI outputs differ across reruns or thread counts"
    return None


def run(verbose: bool = True) -> int:
    """Run every self-test; prints one PASS/FAIL line per check."""
    checks = [
        ("merge and coefficients match direct formula evaluation", _check_merge_oracle),
        ("bundled metric fixtures reproduce published rows", _check_metrics_fixture),
        ("directional-consistency gradient matches finite differences", _check_dc_gradient),
        ("distillation thresholds and identity cases", _check_distillation),
        ("container serialization roundtrip and fingerprint stability", _check_serialization),
        ("CLI determinism across reruns and thread counts", _check_cli_determinism),
    ]
    failures = 0
    for name, check in checks:
        try:
            problem = check()
        except Exception as exc:  # a crashing check is a failing check
            problem = f"raised {type(exc).__name__}: {exc}"
        if problem is None:
            if verbose:
                print(f"PASS {name}")
        else:
            failures += 1
            if verbose:
                print(f"FAIL {name}: {problem}")
    return 1 if failures else 0
