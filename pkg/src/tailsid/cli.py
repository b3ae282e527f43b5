"""Command-line entry point.

Subcommands: generate, train, eval, benchmark, inspect. Every run writes a
manifest with the full effective configuration, derived seeds, host
description and checkpoint lineage into its --out directory; nothing is
written outside that directory. Exit codes: 0 success, 1 validation or
usage error, 2 numeric divergence (the last finite checkpoint is kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import multiprocessing
import os
import platform
import sys

import numpy as np

from . import __version__, evaluation, metamodel, trainer
from .checkpoint import load_full_checkpoint, read_manifest
from .config import dataclass_from_dict, parse_config
from .errors import CheckpointError, ConfigError, CsvFormatError, NumericError
from .seeds import derive_seed
from .sysgen import TaskStreamConfig, generate_batch, write_task_csv


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()


def _host_description() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


class _Manifest:
    """Collects run metadata and writes it once, at completion."""

    def __init__(self, command: str, out_dir: str, config: dict, seeds: dict):
        self.data = {
            "artifact_version": __version__,
            "command": command,
            "config": config,
            "seeds": seeds,
            "host": _host_description(),
            "started_utc": _utc_now(),
        }
        self.out_dir = out_dir

    def finish(self, **extra) -> None:
        self.data.update(extra)
        self.data["finished_utc"] = _utc_now()
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _lineage(parent: str | None, payload_checksum: str) -> str:
    base = (parent or "root") + "/" + payload_checksum
    return hashlib.sha256(base.encode("utf-8")).hexdigest()[:16]


def _make_pool(threads: int):
    if threads <= 1:
        return None
    return multiprocessing.Pool(processes=threads)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_generate(args) -> int:
    bundle = parse_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    manifest = _Manifest("generate", args.out, bundle.to_dict(),
                         {"stream": bundle.stream.seed})
    pool = _make_pool(args.threads)
    try:
        write_task_csv(
            bundle.stream,
            args.n_tasks,
            os.path.join(args.out, "tasks.csv"),
            os.path.join(args.out, "tasks_config.json"),
            start=args.start,
            pool=pool,
        )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    manifest.finish(n_tasks=args.n_tasks, start_index=args.start)
    return 0


def _cmd_train(args) -> int:
    bundle = parse_config(args.config)
    train_config = bundle.train
    if args.mode is not None:
        train_config = dataclasses.replace(train_config, mode=args.mode)
    manifest = _Manifest(
        "train",
        args.out,
        {**bundle.to_dict(), "train": dataclasses.asdict(train_config)},
        {"stream": bundle.stream.seed, "train": train_config.seed,
         "validation": derive_seed(bundle.stream.seed, "validation")},
    )
    pool = _make_pool(args.threads)
    parent_lineage = None
    if args.resume is not None:
        parent_lineage = read_manifest(args.resume)["payload_sha256"][:16]
    try:
        params, _ = trainer.run_training(
            train_config,
            bundle.model,
            bundle.stream,
            args.out,
            resume_from=args.resume,
            pool=pool,
        )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    final_path = os.path.join(args.out, "final.ckpt")
    checksum = read_manifest(final_path)["payload_sha256"]
    manifest.finish(
        final_checkpoint="final.ckpt",
        checkpoint_lineage=_lineage(parent_lineage, checksum),
        param_count=metamodel.param_count(bundle.model),
    )
    print(f"trained {train_config.max_iter} iterations -> {final_path}")
    return 0


_INPUT_CLASSES = {"wn": "white_noise", "rbs": "rbs", "multisine": "multisine"}


def _cmd_eval(args) -> int:
    arrays, model_config, extra = load_full_checkpoint(args.checkpoint)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    if args.config is not None:
        stream = parse_config(args.config).stream
    elif "stream_config" in extra:
        data = dict(extra["stream_config"])
        excitation = data.pop("excitation", {})
        stream = dataclass_from_dict(
            TaskStreamConfig, {**data, "excitation": excitation}, "checkpoint.stream"
        )
    else:
        raise ConfigError(
            "checkpoint carries no stream config; pass --config to define the task stream"
        )
    kind = _INPUT_CLASSES[args.input_class]
    stream = dataclasses.replace(
        stream,
        excitation=dataclasses.replace(stream.excitation, kind=kind),
        seed=derive_seed(stream.seed, f"eval/{args.input_class}"),
    )
    manifest = _Manifest(
        "eval", args.out,
        {"stream": dataclasses.asdict(stream), "model": dataclasses.asdict(model_config)},
        {"eval_stream": stream.seed},
    )
    manifest.data["checkpoint_lineage"] = read_manifest(args.checkpoint)["payload_sha256"][:16]
    pool = _make_pool(args.threads)
    try:
        tasks = generate_batch(stream, 0, args.n_tasks, pool=pool)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    predictor = evaluation.make_predictor(params, model_config)
    report = evaluation.evaluate_batch(
        predictor, tasks, tail_fraction=args.tail_fraction, n_bins=args.bins
    )
    paths = evaluation.emit_report(report, args.out)
    manifest.finish(
        n_tasks=args.n_tasks,
        input_class=args.input_class,
        mean_rmse=report.mean_rmse,
        tail_mean_rmse=report.tail_mean_rmse,
        median_rmse=report.median_rmse,
    )
    print(
        f"evaluated {args.n_tasks} tasks ({args.input_class}): "
        f"mean RMSE {report.mean_rmse:.6f}, tail RMSE {report.tail_mean_rmse:.6f}, "
        f"median RMSE {report.median_rmse:.6f}"
    )
    print(f"report written to {paths['report']}")
    return 0


def _cmd_benchmark(args) -> int:
    arrays, model_config, _ = load_full_checkpoint(args.checkpoint)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    train_series = evaluation.load_two_column_csv(
        args.train_csv, args.u_column, args.y_column, args.delimiter
    )
    test_series = [
        evaluation.load_two_column_csv(p, args.u_column, args.y_column, args.delimiter)
        for p in args.test_csv
    ]
    manifest = _Manifest(
        "benchmark", args.out,
        {"m": args.m, "c": args.c, "chunk": args.chunk,
         "model": dataclasses.asdict(model_config)},
        {},
    )
    manifest.data["checkpoint_lineage"] = read_manifest(args.checkpoint)["payload_sha256"][:16]
    predictor = evaluation.make_predictor(params, model_config)
    report = evaluation.run_benchmark(
        predictor, train_series, test_series, m=args.m, c=args.c, chunk=args.chunk
    )
    paths = evaluation.write_benchmark_report(report, args.out)
    manifest.finish(series={s.name: s.rmse for s in report.series})
    for s in report.series:
        print(f"{s.name}: RMSE {s.rmse:.6f} over {s.n_contexts} contexts")
    print(f"report written to {paths['report']}")
    return 0


def _cmd_inspect(args) -> int:
    manifest = read_manifest(args.checkpoint)
    config = metamodel.ModelConfig(**manifest["model_config"])
    print(f"checkpoint:   {args.checkpoint}")
    print(f"format:       {manifest['format']} v{manifest['format_version']}")
    print(f"param_count:  {metamodel.param_count(config)}")
    print(f"checksum:     {manifest['payload_sha256']}")
    print(f"model_config: {json.dumps(manifest['model_config'], sort_keys=True)}")
    extra = manifest.get("extra", {})
    if extra:
        print(f"iteration:    {extra.get('iteration', 'n/a')}")
        print(f"kind:         {extra.get('kind', 'model')}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailsid",
        description="Tail-robust meta training and evaluation of an in-context "
                    "learner for nonlinear system identification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a batch of tasks to CSV")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--n-tasks", type=int, required=True)
    p.add_argument("--start", type=int, default=0, help="first task index")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--mode", choices=["standard", "robust"], default=None,
                   help="override train.mode from the config")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="zero-shot evaluation on a fresh test batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-class", choices=sorted(_INPUT_CLASSES), default="wn")
    p.add_argument("--n-tasks", type=int, default=1000)
    p.add_argument("--tail-fraction", type=float, default=0.4)
    p.add_argument("--bins", type=int, default=100, help="histogram bin count")
    p.add_argument("--config", default=None,
                   help="run configuration JSON overriding the checkpoint stream")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("benchmark", help="iterative inference over recorded data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-csv", required=True)
    p.add_argument("--test-csv", action="append", required=True,
                   help="repeatable: one per test record")
    p.add_argument("--m", type=int, default=400, help="context subsequence length")
    p.add_argument("--c", type=int, default=30, help="initial condition length")
    p.add_argument("--chunk", type=int, default=100)
    p.add_argument("--u-column", default="0")
    p.add_argument("--y-column", default="1")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def _column(value: str) -> int | str:
    return int(value) if value.lstrip("-").isdigit() else value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "u_column"):
        args.u_column = _column(args.u_column)
        args.y_column = _column(args.y_column)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"last finite checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, CsvFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())
