"""Batch command-line surface for the codec and the generation-loss lab.

Subcommands: make-toy-data, train, compress, decompress, multigen, report.
Exit codes are 0 on success, 1 on runtime failure, 2 on usage or validation
errors. Every command is deterministic given its inputs and declared seeds;
nothing is read from environment variables, and all output files are written
atomically (temp file plus rename).
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .codec import Bitstream, bpp
from .codec import compress as codec_compress
from .codec import decompress as codec_decompress
from .codec import load_model
from .multigen import (
    PSNR_CAP,
    LearnedCodec,
    MultigenError,
    SUMMARY_FIRST_LAST_COLUMNS,
    atomic_write_text,
    average_dcr,
    make_idempotent_control,
    max_drop_of,
    psnr_y_drop,
    read_trace_csv,
    summarize_deltas,
    summarize_first_last,
    summary_delta_columns,
    write_trace_csv,
)
from .pointcloud import PointCloud, parse_ply, synthetic_cube_cloud, write_ply
from .training import (
    TrainConfig,
    TrainingError,
    load_train_state,
    parse_kv,
    save_train_state,
    train,
    write_train_log,
)


class UsageError(ValueError):
    """Bad flags, config, or plan; maps to exit code 2."""


def _atomic_write_bytes(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path: str, kind: str) -> bytes:
    if not os.path.isfile(path):
        raise UsageError(f"{kind} not found: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def _csv_text(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


# ---------------------------------------------------------------------------
# make-toy-data

def _toy_cloud_exact(points: int, seed: int) -> PointCloud:
    """Synthetic cloud with exactly `points` points (generator deduplicates,
    so oversample until the target is reached, then truncate)."""
    want = points
    for _ in range(24):
        cloud = synthetic_cube_cloud(want, seed)
        if len(cloud) >= points:
            return PointCloud(cloud.positions[:points], cloud.colors[:points],
                              cloud.resolution_bits)
        want = want * 2
    raise UsageError(f"cannot place {points} distinct points on the toy surface")


def cmd_make_toy_data(args) -> int:
    cloud = _toy_cloud_exact(args.points, args.seed)
    _atomic_write_bytes(args.out, write_ply(cloud, fmt=args.format))
    print(f"wrote {args.out}: {len(cloud)} points")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    try:
        kv = parse_kv(_read_bytes(args.config, "config file").decode())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data_paths = args.data or [p for p in kv.pop("data", "").split(",") if p]
    out_checkpoint = args.out_checkpoint or kv.pop("out_checkpoint", None)
    out_log = args.out_log or kv.pop("out_log", None)
    resume = args.resume or kv.pop("resume", None)
    kv.pop("out_checkpoint", None)
    kv.pop("out_log", None)
    if not data_paths:
        raise UsageError("no training data given (data= in config or --data)")
    if not out_checkpoint:
        raise UsageError("no checkpoint path given "
                         "(out_checkpoint= in config or --out-checkpoint)")
    if out_log is None:
        out_log = out_checkpoint + ".log.csv"
    try:
        config = TrainConfig.from_mapping(kv)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    dataset = [parse_ply(_read_bytes(p, "training data")) for p in data_paths]
    state = None
    if resume:
        if not os.path.isfile(resume):
            raise UsageError(f"resume checkpoint not found: {resume}")
        state = load_train_state(resume)

    def progress(stats):
        print(f"epoch {stats.epoch}/{config.epochs} lr {stats.lr:g} "
              f"total {stats.total:.6g}", file=sys.stderr)

    result = train(dataset, config, state=state, progress=progress)
    save_train_state(out_checkpoint, result)
    write_train_log(out_log, result.log)
    print(f"trained {config.constraint_set} for {config.epochs} epochs: "
          f"{out_checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# compress / decompress

def cmd_compress(args) -> int:
    cloud = parse_ply(_read_bytes(args.input, "input PLY"))
    model, _ = load_model(_require_file(args.checkpoint, "checkpoint"))
    stream = codec_compress(cloud, model)
    raw = stream.to_bytes()
    _atomic_write_bytes(args.out, raw)
    print(f"{args.out}: {len(cloud)} points, {len(raw)} bytes, "
          f"{bpp(raw, len(cloud)):.6f} bpp")
    return 0


def cmd_decompress(args) -> int:
    stream = Bitstream.from_bytes(_read_bytes(args.stream, "stream"))
    geometry = parse_ply(_read_bytes(args.geometry, "geometry PLY"))
    model, _ = load_model(_require_file(args.checkpoint, "checkpoint"))
    if stream.lambda_id != model.lambda_id:
        print(f"warning: stream lambda_id {stream.lambda_id} does not match "
              f"checkpoint lambda_id {model.lambda_id}", file=sys.stderr)
    cloud = codec_decompress(stream, geometry, model)
    _atomic_write_bytes(args.out, write_ply(cloud, fmt=args.format))
    print(f"{args.out}: {len(cloud)} points")
    return 0


def _require_file(path: str, kind: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{kind} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# multigen

@dataclass(frozen=True)
class PlanCell:
    label: str
    sequence: str
    input_ply: str
    generations: int
    checkpoint: str | None  # None selects the idempotent control codec
    rate_point: str


@dataclass
class ExperimentPlan:
    out_dir: str
    cells: list


_CELL_FIELDS = {"label", "sequence", "input", "checkpoint", "control",
                "generations", "rate_point"}


def parse_plan(text: str, base_dir: str) -> ExperimentPlan:
    """Flat key=value plan; cell fields are keyed cell.<index>.<field>.

    Relative paths resolve against the plan file's directory. Validation
    covers structure, file existence, and label uniqueness before any cell
    runs; checkpoints are opened to pin down their rate point.
    """
    try:
        kv = parse_kv(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if "out_dir" not in kv:
        raise UsageError("plan is missing out_dir")
    out_dir = os.path.join(base_dir, kv.pop("out_dir"))
    groups = {}
    for key, value in kv.items():
        parts = key.split(".", 2)
        if len(parts) != 3 or parts[0] != "cell" or not parts[1].isdigit():
            raise UsageError(f"unknown plan key: {key}")
        if parts[2] not in _CELL_FIELDS:
            raise UsageError(f"unknown cell field {parts[2]!r} in {key}")
        groups.setdefault(int(parts[1]), {})[parts[2]] = value
    if not groups:
        raise UsageError("plan has no cells")
    cells = []
    labels = set()
    for index in sorted(groups):
        fields = groups[index]
        for required in ("label", "input", "generations"):
            if required not in fields:
                raise UsageError(f"cell {index} is missing {required}")
        label = fields["label"]
        if label in labels:
            raise UsageError(f"duplicate cell label {label!r}")
        labels.add(label)
        generations = int(fields["generations"])
        if generations < 1:
            raise UsageError(f"cell {index}: generations must be >= 1")
        input_ply = os.path.join(base_dir, fields["input"])
        if not os.path.isfile(input_ply):
            raise UsageError(f"cell {index}: input not found: {input_ply}")
        is_control = fields.get("control", "0").lower() in ("1", "true", "yes")
        checkpoint = fields.get("checkpoint")
        if is_control == (checkpoint is not None):
            raise UsageError(
                f"cell {index}: exactly one of checkpoint/control required")
        rate_point = fields.get("rate_point", "")
        if checkpoint is not None:
            checkpoint = os.path.join(base_dir, checkpoint)
            if not os.path.isfile(checkpoint):
                raise UsageError(f"cell {index}: checkpoint not found: {checkpoint}")
            if not rate_point:
                model, _ = load_model(checkpoint)
                rate_point = f"lambda{model.lambda_id}"
        elif not rate_point:
            rate_point = "control"
        sequence = fields.get(
            "sequence", os.path.splitext(os.path.basename(input_ply))[0])
        cells.append(PlanCell(label=label, sequence=sequence,
                              input_ply=input_ply, generations=generations,
                              checkpoint=checkpoint, rate_point=rate_point))
    return ExperimentPlan(out_dir=out_dir, cells=cells)


def _run_plan_cell(cell: PlanCell):
    from .multigen import run_multigen  # local import keeps workers cheap
    cloud = parse_ply(_read_bytes(cell.input_ply, "input PLY"))
    if cell.checkpoint is None:
        codec = make_idempotent_control()
    else:
        model, _ = load_model(cell.checkpoint)
        codec = LearnedCodec(model)
    return run_multigen(cloud, codec, cell.generations, sequence=cell.sequence,
                        method=cell.label, rate_point=cell.rate_point)


def cmd_multigen(args) -> int:
    plan = parse_plan(_read_bytes(args.plan, "plan file").decode(),
                      base_dir=os.path.dirname(os.path.abspath(args.plan)))
    os.makedirs(plan.out_dir, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            traces = list(pool.map(_run_plan_cell, plan.cells))
    else:
        traces = [_run_plan_cell(cell) for cell in plan.cells]
    shared_max_drop = max_drop_of(traces)
    paths = []
    for cell, trace in zip(plan.cells, traces):
        path = os.path.join(plan.out_dir, f"{cell.label}.trace.csv")
        write_trace_csv(path, [trace], max_drop=shared_max_drop)
        paths.append(path)
    # summaries are recomputed from the CSVs just written, so they are a pure
    # function of the trace files by construction
    reread = [read_trace_csv(p)[0] for p in paths]
    atomic_write_text(
        os.path.join(plan.out_dir, "summary_first_last.csv"),
        _csv_text(SUMMARY_FIRST_LAST_COLUMNS, summarize_first_last(reread)))
    atomic_write_text(
        os.path.join(plan.out_dir, "summary_deltas.csv"),
        _csv_text(summary_delta_columns(), summarize_deltas(reread)))
    for trace in reread:
        k = trace.generations
        print(f"{trace.method}: generations={k} bpp_1={trace.bpp[0]:.4f} "
              f"psnr_1={min(trace.psnr[0], PSNR_CAP):.4f} "
              f"drop_{k}={psnr_y_drop(trace, k):.4f}")
    return 0


# ---------------------------------------------------------------------------
# report

def _group_traces(traces):
    groups = {}
    order = []
    for t in traces:
        key = (t.method, t.rate_point)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(t)
    return [(key, groups[key]) for key in order]


def cmd_report(args) -> int:
    files = sorted(glob.glob(os.path.join(args.trace_dir, "*.trace.csv")))
    if not files:
        raise UsageError(f"no trace CSVs in {args.trace_dir}")
    traces = [t for f in files for t in read_trace_csv(f)]
    os.makedirs(args.out_dir, exist_ok=True)
    shared_max_drop = max_drop_of(traces)

    agg_rows = []
    plot = io.StringIO()
    for (method, rate_point), group in _group_traces(traces):
        plot.write(f"# {method} {rate_point}\n")
        for k in range(1, max(t.generations for t in group) + 1):
            present = [t for t in group if t.generations >= k]
            mean_bpp = math.fsum(t.bpp[k - 1] for t in present) / len(present)
            mean_psnr = math.fsum(min(t.psnr[k - 1], PSNR_CAP)
                                  for t in present) / len(present)
            mean_drop = math.fsum(psnr_y_drop(t, k)
                                  for t in present) / len(present)
            agg_rows.append([method, rate_point, str(k), repr(mean_bpp),
                             repr(mean_psnr), repr(mean_drop)])
            plot.write(f"{k} {repr(mean_drop)}\n")
        plot.write("\n")

    dcr_rows = []
    for (method, rate_point), group in _group_traces(traces):
        value = average_dcr(group, shared_max_drop)
        dcr_rows.append([method, rate_point,
                         "converged" if value is None else repr(value)])

    atomic_write_text(
        os.path.join(args.out_dir, "aggregate.csv"),
        _csv_text(("method", "rate_point", "k", "mean_bpp", "mean_psnr_y",
                   "mean_psnr_y_drop"), agg_rows))
    atomic_write_text(
        os.path.join(args.out_dir, "dcr_summary.csv"),
        _csv_text(("method", "rate_point", "average_dcr"), dcr_rows))
    atomic_write_text(os.path.join(args.out_dir, "drop_vs_k.dat"),
                      plot.getvalue())
    print(f"aggregated {len(traces)} traces from {len(files)} files "
          f"into {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgpcc",
        description="Learned point-cloud attribute codec and its "
                    "multi-generation robustness lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data",
                       help="generate a synthetic cube-surface cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("ascii", "binary_le"),
                   default="binary_le")
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("train", help="train a codec model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", action="append",
                   help="training PLY (repeatable; overrides config data=)")
    p.add_argument("--out-checkpoint")
    p.add_argument("--out-log")
    p.add_argument("--resume", help="continue from a saved training state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode attributes of a PLY cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode attributes onto geometry")
    p.add_argument("--stream", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ascii", "binary_le"),
                   default="binary_le")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("multigen", help="run an experiment plan of "
                                        "repeated-compression chains")
    p.add_argument("--plan", required=True)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_multigen)

    p = sub.add_parser("report", help="aggregate trace CSVs into plot data")
    p.add_argument("--trace-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
