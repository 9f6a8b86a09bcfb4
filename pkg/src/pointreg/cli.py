"""Command-line harness: generate | train | register | eval | bench.

Global flags: ``--seed`` (u64, drives every random draw), ``--config``
(flat key-value file, see :mod:`pointreg.config`), ``--threads`` (sample
parallelism for ``eval``). Exit codes: 0 on success, 2 for input or
configuration errors, 3 for registration failures.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import reports
from .estimation import (
    PIPELINE_STAGES,
    PipelineConfig,
    RegistrationFailureError,
    StageError,
    register_pair,
)
from .geometry import InsufficientPointsError, evaluate_transform
from .io import CloudFormatError, load_cloud
from .scenes import (
    DatasetError,
    SceneGenerationError,
    dataset_load,
    dataset_save,
    dataset_statistics,
    generate_dataset,
)
from .training import train
from .weights_io import WeightsFormatError, load_model, save_model

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_REGISTRATION_FAILURE = 3

STATS_FILE = "statistics.csv"

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointreg",
        description="Point-cloud registration via learned correspondences",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for all random draws")
    parser.add_argument("--config", type=Path, help="flat key-value config file")
    parser.add_argument(
        "--threads", type=int, default=1, help="worker processes for eval"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic scene-pair dataset")
    p.add_argument("--output", type=Path, required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=20, help="number of scene pairs")

    p = sub.add_parser("train", help="train feature weights on a dataset")
    p.add_argument(
        "--dataset", type=Path, required=True,
        help="directory containing train/ and val/ sub-datasets",
    )
    p.add_argument("--output", type=Path, required=True, help="weights file to write")
    p.add_argument(
        "--log", type=Path, default=None,
        help="epoch metrics CSV (default: next to the weights file)",
    )

    p = sub.add_parser("register", help="register a source cloud onto a target cloud")
    p.add_argument("source", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--icp", action="store_true", help="refine the pose with ICP")
    p.add_argument("--kappa", type=float, default=None, help="RANSAC inlier threshold")
    p.add_argument("--temperature", type=float, default=None, help="softmax temperature")
    p.add_argument(
        "--output", type=Path, default=Path("registration_result.json"),
        help="JSON result record",
    )

    p = sub.add_parser("eval", help="evaluate weights over a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--icp", action="store_true")
    p.add_argument("--output-dir", type=Path, default=Path("eval_report"))

    p = sub.add_parser("bench", help="per-stage timing over a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--no-icp", action="store_true", help="skip the ICP stage")
    p.add_argument("--output", type=Path, default=Path("bench.csv"))
    return parser


def _load_entries(args) -> dict[str, str]:
    if args.config is None:
        return {}
    return config_mod.load_config(args.config)


def cmd_generate(args) -> int:
    entries = _load_entries(args)
    cfg = config_mod.scene_config(entries, seed=args.seed)
    pairs = generate_dataset(cfg, args.count)
    dataset_save(pairs, args.output)
    stats = dataset_statistics(pairs)
    rows = []
    for name, table in stats.items():
        rows.extend([name, repr(float(v)), repr(float(f))] for v, f in table)
    reports.write_csv(
        args.output / STATS_FILE, ("quantity", "value", "cumulative_fraction"), rows
    )
    print(f"wrote {len(pairs)} scene pairs to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    entries = _load_entries(args)
    train_dir = args.dataset / "train"
    val_dir = args.dataset / "val"
    for path in (train_dir, val_dir):
        if not path.is_dir():
            raise DatasetError(
                f"expected {path} to exist; the train command needs a dataset "
                "directory with train/ and val/ splits"
            )
    train_pairs = dataset_load(train_dir)
    val_pairs = dataset_load(val_dir)
    model_cfg = config_mod.model_config(entries)
    train_cfg = config_mod.train_config(entries, seed=args.seed)
    best, history = train(train_pairs, val_pairs, model_cfg, train_cfg)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_model(best, args.output)
    log_path = args.log or args.output.with_name(args.output.stem + "_epochs.csv")
    reports.write_csv(
        log_path,
        ("epoch", "train_loss", "val_loss", "learning_rate"),
        [
            [str(h.epoch), repr(h.train_loss), repr(h.val_loss), repr(h.learning_rate)]
            for h in history
        ],
    )
    print(f"wrote weights to {args.output} and epoch log to {log_path}")
    return EXIT_OK


def _pipeline_from_args(args, entries) -> PipelineConfig:
    cfg = config_mod.pipeline_config(entries, seed=args.seed, use_icp=args.icp)
    if args.kappa is not None:
        cfg = replace(cfg, ransac=replace(cfg.ransac, inlier_threshold=args.kappa))
    if args.temperature is not None:
        cfg = replace(cfg, temperature=args.temperature)
    return cfg


def cmd_register(args) -> int:
    entries = _load_entries(args)
    model = load_model(args.weights)
    source = load_cloud(args.source)
    target = load_cloud(args.target)
    cfg = _pipeline_from_args(args, entries)
    result = register_pair(source, target, model, cfg)
    for row in result.transform.matrix():
        print(" ".join(repr(float(v)) for v in row))
    record = {
        "transform": result.transform.matrix().tolist(),
        "inlier_count": result.inlier_count,
        "inlier_indices": result.inlier_indices.tolist(),
        "iterations_run": result.iterations_run,
        "elapsed_ms": result.elapsed * 1e3,
        "stage_times_ms": {k: v * 1e3 for k, v in result.stage_times.items()},
    }
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_text(json.dumps(record, indent=2) + "\n")
    return EXIT_OK


def _eval_one(payload) -> reports.EvalSample:
    pair, model, cfg = payload
    try:
        result = register_pair(pair.source, pair.target, model, cfg)
    except (StageError, RegistrationFailureError) as exc:
        return reports.EvalSample(
            scene_id=pair.scene_id, overlap=pair.overlap, te=None, re=None,
            success=False, inliers=0, elapsed=0.0, error=str(exc),
        )
    metrics = evaluate_transform(result.transform, pair.ground_truth)
    return reports.EvalSample(
        scene_id=pair.scene_id,
        overlap=pair.overlap,
        te=metrics.translation_error,
        re=metrics.rotation_error,
        success=metrics.success,
        inliers=result.inlier_count,
        elapsed=result.elapsed,
    )


def cmd_eval(args) -> int:
    entries = _load_entries(args)
    model = load_model(args.weights)
    pairs = dataset_load(args.dataset)
    if not pairs:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    cfg = config_mod.pipeline_config(entries, seed=args.seed, use_icp=args.icp)
    payloads = [(pair, model, cfg) for pair in pairs]
    if args.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.threads) as pool:
            samples = list(pool.map(_eval_one, payloads))
    else:
        samples = [_eval_one(p) for p in payloads]
    out = args.output_dir
    reports.write_csv(
        out / "per_sample.csv",
        reports.EVAL_SAMPLE_HEADER,
        reports.eval_sample_rows(samples),
    )
    reports.write_csv(
        out / "summary.csv", reports.EVAL_SUMMARY_HEADER, reports.aggregate_eval(samples)
    )
    recall = sum(1 for s in samples if s.success) / len(samples)
    print(f"evaluated {len(samples)} pairs, overall recall {recall:.3f}; reports in {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    entries = _load_entries(args)
    model = load_model(args.weights)
    pairs = dataset_load(args.dataset)
    if not pairs:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    cfg = config_mod.pipeline_config(entries, seed=args.seed, use_icp=not args.no_icp)
    # One untimed warm-up pass absorbs JIT compilation of the sampling kernel.
    register_pair(pairs[0].source, pairs[0].target, model, cfg)
    stage_samples: dict[str, list[float]] = {s: [] for s in PIPELINE_STAGES}
    totals: list[float] = []
    for _ in range(args.repetitions):
        for pair in pairs:
            result = register_pair(pair.source, pair.target, model, cfg)
            for stage, value in result.stage_times.items():
                stage_samples[stage].append(value)
            totals.append(result.elapsed)
    rows = []
    for stage in PIPELINE_STAGES:
        values = np.array(stage_samples[stage])
        rows.append([stage, repr(float(values.mean() * 1e3)), repr(float(values.std() * 1e3))])
    total = np.array(totals)
    rows.append(["total", repr(float(total.mean() * 1e3)), repr(float(total.std() * 1e3))])
    reports.write_csv(args.output, ("stage", "mean_ms", "std_ms"), rows)
    for stage, mean_ms, std_ms in rows:
        print(f"{stage:>12}: {float(mean_ms):9.2f} ms +- {float(std_ms):.2f}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "register": cmd_register,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

_INPUT_ERRORS = (
    config_mod.ConfigError,
    CloudFormatError,
    DatasetError,
    WeightsFormatError,
    FileNotFoundError,
    NotADirectoryError,
    InsufficientPointsError,
    ValueError,
)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (RegistrationFailureError, StageError, SceneGenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
