"""Command line front end: ``fedca run | sweep | gap``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import ParseError, dump_splits, load_ratings
from .federation import GAP_COLUMNS, Federation, prepare_clients, run_experiment, run_gap_experiment

logger = logging.getLogger("fedca")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3

SWEEP_AXES = ("rho", "alpha", "beta", "train_ratio", "mode")
DEFAULT_S_VALUES = tuple(range(10, 101, 10))


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dataset_name(path: str) -> str:
    p = Path(path)
    name = p.parent.name or p.stem
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name) or "dataset"


def _run_dir_name(config: ExperimentConfig, started: datetime) -> str:
    stamp = started.strftime("%Y%m%dT%H%M%S")
    return f"{_dataset_name(config.dataset)}-{config.mode}-{config.global_seed}-{stamp}"


def _resolve(args) -> tuple[ExperimentConfig, str]:
    try:
        return load_config(args.config, args.set or (), os.environ.get("FEDCA_SEED"))
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def _load_dataset(config: ExperimentConfig):
    try:
        return load_ratings(config.dataset, config.format)
    except (OSError, ParseError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_DATASET, f"dataset error: {exc}") from None


class RunDirectory:
    """Outputs are staged in a hidden sibling directory and renamed into place on success."""

    def __init__(self, out_root: Path, name: str):
        self.out_root = out_root
        self.final = out_root / name
        self.path: Path | None = None

    def __enter__(self):
        self.out_root.mkdir(parents=True, exist_ok=True)
        if self.final.exists():
            raise CliError(EXIT_CONFIG, f"output directory {self.final} already exists")
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.out_root))
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.path.rename(self.final)
        else:
            shutil.rmtree(self.path, ignore_errors=True)
        return False


def _write_manifest(path: Path, command: str, config: ExperimentConfig, digest: str,
                    out_dir: Path, started: datetime, extra=None) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_sha256": digest,
        "output_dir": str(out_dir),
        "started": started.isoformat(),
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_matrix(path: Path, M) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for u, row in enumerate(np.asarray(M)):
            writer.writerow([u] + [repr(float(x)) for x in row])


def _parse_values(axis: str, raw: str) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise CliError(EXIT_CONFIG, "sweep needs at least one value")
    if axis == "mode":
        return items
    try:
        return [float(v) for v in items]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad numeric value in {raw!r}") from None


def cmd_run(args) -> int:
    config, digest = _resolve(args)
    ds = _load_dataset(config)
    started = datetime.now(timezone.utc)
    with RunDirectory(Path(args.out), _run_dir_name(config, started)) as rd:
        _write_manifest(rd.path, "run", config, digest, rd.final, started, {"workers": args.workers})
        if args.dump_splits:
            dump_splits(prepare_clients(config, ds), ds, rd.path / "splits.jsonl")
        with open(rd.path / "metrics.jsonl", "w") as metrics, open(rd.path / "timings.jsonl", "w") as timings:

            def emit(m):
                metrics.write(json.dumps(m.to_record(with_timing=False)) + "\n")
                timings.write(json.dumps({"round": m.round, "seconds": m.seconds}) + "\n")
                metrics.flush()
                logger.info("round %d hr@10 test=%.4f ndcg@10 test=%.4f", m.round, m.hr10_test, m.ndcg10_test)

            result = Federation(config, dataset=ds, workers=args.workers).run(emit)
        if args.dump_weights:
            _write_matrix(rd.path / "weights_W.csv", result.weights)
            if result.kernels is not None:
                # rows/columns of S and C follow the last round's cohort order
                if result.kernels.S is not None:
                    _write_matrix(rd.path / "weights_S.csv", result.kernels.S)
                if result.kernels.C is not None:
                    _write_matrix(rd.path / "weights_C.csv", result.kernels.C)
    print(rd.final)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, digest = _resolve(args)
    values = _parse_values(args.axis, args.values)
    try:
        configs = [config.replace(**{args.axis: v}) for v in values]
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    ds = _load_dataset(config)
    started = datetime.now(timezone.utc)
    with RunDirectory(Path(args.out), _run_dir_name(config, started)) as rd:
        _write_manifest(rd.path, "sweep", config, digest, rd.final, started,
                        {"axis": args.axis, "values": values, "workers": args.workers})
        with open(rd.path / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "hr10_test", "ndcg10_test"])
            for value, cfg in zip(values, configs):
                final = run_experiment(cfg, dataset=ds, workers=args.workers).history[-1]
                writer.writerow([value, repr(final.hr10_test), repr(final.ndcg10_test)])
                fh.flush()
                logger.info("%s=%s hr@10 test=%.4f", args.axis, value, final.hr10_test)
    print(rd.final)
    return EXIT_OK


def cmd_gap(args) -> int:
    config, digest = _resolve(args)
    if args.s_values:
        try:
            s_values = [int(v) for v in args.s_values.split(",") if v.strip()]
        except ValueError:
            raise CliError(EXIT_CONFIG, f"bad s value in {args.s_values!r}") from None
    else:
        s_values = list(DEFAULT_S_VALUES)
    if not s_values or min(s_values) < 1:
        raise CliError(EXIT_CONFIG, "s values must be positive integers")
    ds = _load_dataset(config)
    started = datetime.now(timezone.utc)
    with RunDirectory(Path(args.out), _run_dir_name(config, started)) as rd:
        _write_manifest(rd.path, "gap", config, digest, rd.final, started,
                        {"s_values": s_values, "workers": args.workers})
        rows = run_gap_experiment(config, s_values, dataset=ds, workers=args.workers)
        with open(rd.path / "gap.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(GAP_COLUMNS)
            for row in rows:
                writer.writerow([row["s"]] + [repr(row[c]) for c in GAP_COLUMNS[1:]])
    print(rd.final)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedca", description="Composite-aggregation federated recommendation")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="client-training threads (default: logical CPUs)")

    run = sub.add_parser("run", help="one federated experiment")
    common(run)
    run.add_argument("--dump-weights", action="store_true", help="write final W, S, C as CSV")
    run.add_argument("--dump-splits", action="store_true", help="write the leave-one-out splits as JSON lines")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one run per value of a config axis")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.set_defaults(func=cmd_sweep)

    gap = sub.add_parser("gap", help="train/test gap of top-s similarity aggregation")
    common(gap)
    gap.add_argument("--s-values", help="comma-separated s values (default 10,20,...,100)")
    gap.set_defaults(func=cmd_gap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
