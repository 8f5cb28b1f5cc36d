"""Command-line surface for batch merging, losses, diagnostics, and metrics.

Exit codes: 0 success, 1 validation/protocol error, 2 I/O or parse error.
With the default ``--format json`` failures also emit a machine-readable
error object on stderr.  All subcommands are deterministic: reruns and any
``--threads`` setting produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from json import JSONDecodeError
from pathlib import Path

import numpy as np

from .checkpoint import (
    load_partition_spec,
    partition_checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from .diagnostics import merge_distance, sign_conflicts
from .errors import CheckpointFormatError, DTypeError, DuetError
from .losses import (
    DcLossConfig,
    dc_loss,
    dc_loss_grad,
    distill_loss,
    load_prediction_batch,
)
from .merge import (
    MergeConfig,
    duet_merge,
    incremental_head_concat,
    iter_incremental_sequence,
    magmax_merge,
    weight_average_merge,
)
from .metrics import compute_metrics, load_protocol, load_records
from .task_vectors import (
    TaskVector,
    compute_task_vector,
    load_task_vector,
    save_task_vector,
    zero_task_vector,
)
from . import selftest

_IO_ERRORS = (CheckpointFormatError, OSError, JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit 1 (2 is reserved for I/O)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _default_threads() -> int:
    raw = os.environ.get("DUET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _common_parent() -> argparse.ArgumentParser:
    parent = _Parser(add_help=False)
    parent.add_argument("-o", "--output", help="output file or directory")
    parent.add_argument(
        "--threads",
        type=int,
        default=_default_threads(),
        help="worker threads for per-layer tensor work (default: DUET_THREADS or 1)",
    )
    parent.add_argument(
        "--format", choices=("json", "csv"), default="json", help="report format (default json)"
    )
    parent.add_argument(
        "--dtype-check",
        action="store_true",
        help="require a single uniform element type across all input tensors",
    )
    return parent


def build_parser() -> _Parser:
    parser = _Parser(prog="duet", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--self-test", action="store_true", help="run the offline fixture self-test and exit"
    )
    common = _common_parent()
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("task-vector", parents=[common], help="compute a shared-partition task vector")
    p.add_argument("base", help="pretrained base checkpoint")
    p.add_argument("fine_tuned", help="fine-tuned checkpoint")
    p.add_argument("--partition", required=True, help="partition manifest JSON")
    p.add_argument("--label", default="", help="free-form task tag")

    merge = sub.add_parser("merge", parents=[], help="merge task vectors onto a base checkpoint")
    merge_sub = merge.add_subparsers(dest="algorithm", parser_class=_Parser)

    p = merge_sub.add_parser("duet", parents=[common], help="layer-wise retention/adaptation merge")
    p.add_argument("base", help="pretrained base checkpoint")
    p.add_argument("--old", required=True, help="old task vector bundle")
    p.add_argument("--curr", required=True, help="current task vector bundle")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--alpha-base", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--report", help="write the per-layer merge report here")

    for name, help_text in (
        ("average", "uniform mean of task vectors added to base"),
        ("magmax", "elementwise largest-magnitude delta added to base"),
    ):
        p = merge_sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("base", help="pretrained base checkpoint")
        p.add_argument("--tv", action="append", required=True, help="task vector bundle (repeatable)")

    p = sub.add_parser("head-concat", parents=[common], help="concatenate task-specific heads")
    p.add_argument("prev", help="previous incremental checkpoint")
    p.add_argument("curr", help="current fine-tuned checkpoint")
    p.add_argument("--partition", required=True)
    p.add_argument("--head-order", choices=("curr-first", "prev-first"), default="curr-first")

    p = sub.add_parser("sequence", parents=[common], help="run the full incremental sequence")
    p.add_argument("base", help="pretrained base checkpoint")
    p.add_argument("fine_tuned", nargs="+", help="fine-tuned checkpoints, in task order")
    p.add_argument("--partition", required=True)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--alpha-base", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--head-order", choices=("curr-first", "prev-first"), default="curr-first")

    p = sub.add_parser("dc-loss", parents=[common], help="directional-consistency loss")
    p.add_argument("--t", dest="tau_t", required=True, help="current task vector bundle")
    p.add_argument("--prev", required=True, help="previous task vector bundle")
    p.add_argument("--prev2", help="task vector two steps back (default: zero vector)")
    p.add_argument("--granularity", choices=("tensor", "element"), default="tensor")
    p.add_argument(
        "--grad-check",
        action="store_true",
        help="compare the analytic gradient against central finite differences",
    )

    p = sub.add_parser("distill", parents=[common], help="masked distillation losses")
    p.add_argument("--curr", required=True, help="current predictions (.json or container)")
    p.add_argument("--old", required=True, help="previous-model predictions")

    diagnose = sub.add_parser("diagnose", parents=[], help="merge diagnostics")
    diagnose_sub = diagnose.add_subparsers(dest="probe", parser_class=_Parser)

    p = diagnose_sub.add_parser("signs", parents=[common], help="sign-conflict statistics")
    p.add_argument("--old", required=True, help="old task vector bundle")
    p.add_argument("--curr", required=True, help="current task vector bundle")
    p.add_argument(
        "--preset",
        choices=("vectors", "updates"),
        default="vectors",
        help="compare the vectors themselves or the successive update deltas",
    )
    p.add_argument("--prev2", help="task vector two steps back (updates preset; default zero)")

    p = diagnose_sub.add_parser("distance", parents=[common], help="L2/cosine to old and current")
    p.add_argument("--merged", required=True, help="merged checkpoint")
    p.add_argument("--old", required=True, help="old checkpoint")
    p.add_argument("--curr", required=True, help="current checkpoint")
    p.add_argument("--partition", help="restrict the comparison to the shared partition")

    p = sub.add_parser("metrics", parents=[common], help="retention/generalization metrics")
    p.add_argument("--protocol", required=True, help="protocol manifest JSON")
    p.add_argument("--records", required=True, help="mAP records (.jsonl or .csv)")

    return parser


def _print_json(payload: dict):
    print(json.dumps(payload, indent=2))


def _write_text(path: str | Path, text: str):
    Path(path).write_text(text, encoding="utf-8")


def _csv_text(rows: list[list]) -> str:
    import io as _io

    buffer = _io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    return buffer.getvalue()


def _enforce_uniform_dtype(args, *tensor_maps):
    if not getattr(args, "dtype_check", False):
        return
    dtypes = set()
    for tensor_map in tensor_maps:
        for arr in tensor_map.values():
            dtypes.add(str(arr.dtype))
    if len(dtypes) > 1:
        raise DTypeError(f"--dtype-check: inputs mix element types {sorted(dtypes)}")


def _require_output(args, what: str = "--output"):
    if not args.output:
        raise DuetError(f"{what} is required for this subcommand")


def _load_tv_maybe_zero(path: str | None, like: TaskVector, label: str) -> TaskVector:
    if path is None:
        return zero_task_vector(like.deltas, like.base_fingerprint, label)
    return load_task_vector(path)


def _cmd_task_vector(args) -> int:
    spec = load_partition_spec(args.partition)
    _require_output(args)
    base_map, base_fp = read_checkpoint(args.base)
    fine_map, _ = read_checkpoint(args.fine_tuned)
    _enforce_uniform_dtype(args, base_map, fine_map)
    base_shared, _ = partition_checkpoint(base_map, spec)
    fine_shared, _ = partition_checkpoint(fine_map, spec)
    vector = compute_task_vector(fine_shared, base_shared, base_fp, args.label)
    save_task_vector(vector, args.output)
    _print_json(
        {
            "output": str(args.output),
            "label": args.label,
            "tensors": len(vector.deltas),
            "base_fingerprint": vector.base_fingerprint,
        }
    )
    return 0


def _base_shared_for(base_map: dict, vector: TaskVector) -> dict:
    return {name: base_map[name] for name in base_map if name in vector.deltas}


def _cmd_merge(args) -> int:
    if not getattr(args, "algorithm", None):
        raise DuetError("merge needs an algorithm: duet, average, or magmax")
    _require_output(args)
    base_map, base_fp = read_checkpoint(args.base)
    if args.algorithm == "duet":
        config = MergeConfig(gamma=args.gamma, alpha_base=args.alpha_base, epsilon=args.epsilon)
        tau_old = load_task_vector(args.old)
        tau_curr = load_task_vector(args.curr)
        _enforce_uniform_dtype(args, base_map, tau_old.deltas, tau_curr.deltas)
        base_shared = _base_shared_for(base_map, tau_old)
        merged, report = duet_merge(
            base_shared, base_fp, tau_old, tau_curr, config, threads=args.threads
        )
        write_checkpoint(merged, args.output)
        if args.report:
            if args.format == "csv":
                _write_text(args.report, _csv_text(report.csv_rows()))
            else:
                _write_text(args.report, report.to_json() + "\n")
        alphas = [record.alpha for record in report.layers]
        _print_json(
            {
                "output": str(args.output),
                "report": str(args.report) if args.report else None,
                "layers": len(report.layers),
                "alpha_min": min(alphas),
                "alpha_max": max(alphas),
                "sign_conflict_fraction": report.sign_conflicts.total_fraction,
                "warnings": report.warnings,
            }
        )
        return 0
    vectors = [load_task_vector(path) for path in args.tv]
    _enforce_uniform_dtype(args, base_map, *[vector.deltas for vector in vectors])
    base_shared = _base_shared_for(base_map, vectors[0])
    if args.algorithm == "average":
        merged = weight_average_merge(base_shared, base_fp, vectors, threads=args.threads)
    else:
        merged = magmax_merge(base_shared, base_fp, vectors, threads=args.threads)
    write_checkpoint(merged, args.output)
    _print_json(
        {"output": str(args.output), "algorithm": args.algorithm, "vectors": len(vectors)}
    )
    return 0


def _cmd_head_concat(args) -> int:
    spec = load_partition_spec(args.partition)
    _require_output(args)
    prev_map, _ = read_checkpoint(args.prev)
    curr_map, _ = read_checkpoint(args.curr)
    _enforce_uniform_dtype(args, prev_map, curr_map)
    _, prev_head = partition_checkpoint(prev_map, spec)
    _, curr_head = partition_checkpoint(curr_map, spec)
    replace = {name for name in curr_head if spec.is_replace(name)}
    head = incremental_head_concat(
        prev_head, curr_head, spec.head_concat_axis, order=args.head_order, replace_names=replace
    )
    write_checkpoint(head, args.output)
    _print_json(
        {
            "output": str(args.output),
            "tensors": len(head),
            "head_order": args.head_order,
            "axis": spec.head_concat_axis,
        }
    )
    return 0


def _cmd_sequence(args) -> int:
    spec = load_partition_spec(args.partition)
    _require_output(args)
    config = MergeConfig(gamma=args.gamma, alpha_base=args.alpha_base, epsilon=args.epsilon)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for step in iter_incremental_sequence(
        args.base, args.fine_tuned, spec, config, head_order=args.head_order
    ):
        ckpt_path = out_dir / f"task{step.task_index:02d}.safetensors"
        write_checkpoint(step.checkpoint, ckpt_path)
        entry = {"task": step.task_index, "checkpoint": str(ckpt_path)}
        if step.report is not None:
            report_path = out_dir / f"task{step.task_index:02d}.report.json"
            _write_text(report_path, step.report.to_json() + "\n")
            entry["report"] = str(report_path)
            entry["warnings"] = step.report.warnings
        summaries.append(entry)
    _print_json({"output": str(out_dir), "tasks": summaries})
    return 0


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _cmd_dc_loss(args) -> int:
    config = DcLossConfig(granularity=args.granularity)
    tau_t = load_task_vector(args.tau_t)
    tau_prev = load_task_vector(args.prev)
    tau_prev2 = _load_tv_maybe_zero(args.prev2, tau_prev, "zero")
    loss = dc_loss(tau_t, tau_prev, tau_prev2, config)
    payload = {"loss": loss, "granularity": args.granularity}
    if args.grad_check:
        grad = dc_loss_grad(tau_t, tau_prev, tau_prev2, config)
        h = 1e-5
        worst = 0.0
        skipped = 0

        def perturbed(name: str, flat_index: int, bump: float) -> float:
            # float64 copy so the bump is applied exactly even for f32 storage
            deltas = {k: v.astype(np.float64) for k, v in tau_t.deltas.items()}
            flat = deltas[name].reshape(-1)
            flat[flat_index] += bump
            return dc_loss(TaskVector(deltas, tau_t.base_fingerprint), tau_prev, tau_prev2, config)

        for name, layer_grad in grad.items():
            d_curr = tau_t.deltas[name].astype(np.float64) - tau_prev.deltas[name].astype(np.float64)
            d_prev = tau_prev.deltas[name].astype(np.float64) - tau_prev2.deltas[name].astype(np.float64)
            flat_grad = layer_grad.reshape(-1)
            flat_prev = d_prev.reshape(-1)
            if config.granularity == "tensor":
                alignment = np.full(flat_prev.size, float(np.sum(d_curr * d_prev)))
            else:
                alignment = (d_curr * d_prev).reshape(-1)
            for flat_index in range(flat_grad.size):
                # A +/-h bump moves this term's alignment by h*|d_prev[i]|; if
                # that can cross the hinge, the stencil straddles the kink.
                if abs(alignment[flat_index]) <= 2.0 * h * abs(flat_prev[flat_index]):
                    skipped += 1
                    continue
                fd = (perturbed(name, flat_index, h) - perturbed(name, flat_index, -h)) / (2 * h)
                analytic = float(flat_grad[flat_index])
                if abs(fd) < 1e-9 and abs(analytic) < 1e-9:
                    continue
                worst = max(worst, _rel_error(fd, analytic))
        payload["grad_check"] = {
            "max_rel_error": worst,
            "near_hinge_skipped": skipped,
            "passed": worst <= 1e-4,
        }
    _print_json(payload)
    return 0


def _cmd_distill(args) -> int:
    curr = load_prediction_batch(args.curr)
    old = load_prediction_batch(args.old)
    result = distill_loss(curr, old)
    _print_json(result.to_dict())
    return 0


def _emit_report(args, payload_dict: dict, csv_rows: list[list]):
    if args.format == "csv":
        text = _csv_text(csv_rows)
        if args.output:
            _write_text(args.output, text)
        else:
            print(text, end="")
    else:
        text = json.dumps(payload_dict, indent=2)
        if args.output:
            _write_text(args.output, text + "\n")
        else:
            print(text)


def _cmd_diagnose(args) -> int:
    if not getattr(args, "probe", None):
        raise DuetError("diagnose needs a probe: signs or distance")
    if args.probe == "signs":
        tau_old = load_task_vector(args.old)
        tau_curr = load_task_vector(args.curr)
        if args.preset == "updates":
            tau_prev2 = _load_tv_maybe_zero(args.prev2, tau_old, "zero")
            left = {
                name: tau_curr.deltas[name].astype(np.float64) - tau_old.deltas[name].astype(np.float64)
                for name in tau_curr.deltas
            }
            right = {
                name: tau_old.deltas[name].astype(np.float64) - tau_prev2.deltas[name].astype(np.float64)
                for name in tau_old.deltas
            }
            report = sign_conflicts(left, right)
        else:
            report = sign_conflicts(tau_old, tau_curr)
        payload = {"preset": args.preset, **report.to_dict()}
        rows = [["tensor", "conflicts", "comparable", "fraction"]]
        for name, entry in report.per_tensor.items():
            rows.append([name, entry.conflicts, entry.comparable, entry.fraction])
        rows.append(["TOTAL", report.total_conflicts, report.total_comparable, report.total_fraction])
        _emit_report(args, payload, rows)
        return 0
    merged_map, _ = read_checkpoint(args.merged)
    old_map, _ = read_checkpoint(args.old)
    curr_map, _ = read_checkpoint(args.curr)
    if args.partition:
        spec = load_partition_spec(args.partition)
        merged_map, _ = partition_checkpoint(merged_map, spec)
        old_map, _ = partition_checkpoint(old_map, spec)
        curr_map, _ = partition_checkpoint(curr_map, spec)
    report = merge_distance(merged_map, old_map, curr_map)
    payload = report.to_dict()
    rows = [
        ["metric", "value"],
        ["l2_to_old", report.l2_to_old],
        ["l2_to_curr", report.l2_to_curr],
        ["cos_to_old", report.cos_to_old],
        ["cos_to_curr", report.cos_to_curr],
    ]
    _emit_report(args, payload, rows)
    return 0


def _cmd_metrics(args) -> int:
    protocol = load_protocol(args.protocol)
    records = load_records(args.records)
    report = compute_metrics(protocol, records)
    print(report.table())
    if args.output:
        if args.format == "csv":
            _write_text(args.output, _csv_text(report.csv_rows()))
        else:
            _write_text(args.output, report.to_json() + "\n")
    return 0


_HANDLERS = {
    "task-vector": _cmd_task_vector,
    "merge": _cmd_merge,
    "head-concat": _cmd_head_concat,
    "sequence": _cmd_sequence,
    "dc-loss": _cmd_dc_loss,
    "distill": _cmd_distill,
    "diagnose": _cmd_diagnose,
    "metrics": _cmd_metrics,
}


def _emit_error(args, exc: Exception):
    fmt = getattr(args, "format", "json") if args is not None else "json"
    if fmt == "json":
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.self_test:
        return selftest.run()
    if not args.command:
        parser.print_usage(sys.stderr)
        print("duet: error: a subcommand is required (or --self-test)", file=sys.stderr)
        return 1
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except _IO_ERRORS as exc:
        _emit_error(args, exc)
        return 2
    except (DuetError, ValueError) as exc:
        _emit_error(args, exc)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
