"""Command line entry point: ``vithash generate | train | encode | eval``.

Every command writes a JSON run manifest next to its outputs recording the
arguments, seeds, library versions, output paths and wall-clock time.

Exit codes: 0 success, 1 I/O or file-format problem, 2 usage or config
error, 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import generate_synthetic, load_dataset, save_dataset, split_protocol
from .errors import ConfigError, ContractError, FormatError
from .retrieval import (
    CodeIndex,
    load_index,
    mean_ap,
    precision_at_topk,
    precision_recall_curve,
    save_index,
)
from .train import Checkpoint, TrainingDiverged, desk_config, encode, load_config, train, write_metrics_csv

log = logging.getLogger("vithash")


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seeds: dict = field(default_factory=dict)
    config: dict | None = None
    outputs: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=lambda: {
        "vithash": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    })

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _args_dict(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


# -- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    ds = generate_synthetic(args.classes, args.per_class, args.size, seed=args.seed, noise=args.noise)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    manifest_path = args.out.with_name(args.out.name + ".manifest.json")
    RunManifest(
        "generate", _args_dict(args), seeds={"data": args.seed}, outputs=[str(args.out)],
        timings={"total_s": time.perf_counter() - t0},
    ).write(manifest_path)
    log.info("wrote %d images to %s", len(ds), args.out)
    return 0


def _splits(data_path: Path, cfg):
    ds = load_dataset(data_path, fmt=_data_format(data_path))
    return split_protocol(ds, cfg.split.queries_per_class, cfg.split.train_per_class, cfg.split.seed)


def _data_format(path: Path) -> str:
    return "cifar10" if path.suffix == ".bin" else "thds"


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    train_set, _, _ = _splits(args.data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    every = max(1, cfg.sgd.total_steps // 20)

    def report(rec):
        if rec["step"] % every == 0 or rec["step"] == cfg.sgd.total_steps - 1:
            log.info("step %5d  lr %.2e  loss %.4f  L_B/pair %.4f  gap %.3f",
                     rec["step"], rec["lr"], rec["loss"], rec["bayes_per_pair"], rec["quant_gap"])

    t_train = time.perf_counter()
    ckpt, history = train(train_set, cfg, on_step=report, dump_dir=args.out)
    t_train = time.perf_counter() - t_train
    ckpt_path, metrics_path = args.out / "model.thck", args.out / "metrics.csv"
    ckpt.save(ckpt_path)
    write_metrics_csv(history, metrics_path)
    RunManifest(
        "train", _args_dict(args), seeds={"train": cfg.seed, "split": cfg.split.seed},
        config=cfg.to_dict(), outputs=[str(ckpt_path), str(metrics_path)],
        timings={"train_s": t_train, "total_s": time.perf_counter() - t0},
    ).write(args.out / "manifest.json")
    log.info("wrote %s and %s", ckpt_path, metrics_path)
    return 0


def cmd_encode(args) -> int:
    t0 = time.perf_counter()
    ckpt = Checkpoint.load(args.ckpt)
    train_set, query, database = _splits(args.data, ckpt.config)
    part = {"train": train_set, "query": query, "database": database}[args.split]
    codes = encode(ckpt, part.images)
    index = CodeIndex.build(codes, part.ids, part.labels)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, args.out)
    RunManifest(
        "encode", _args_dict(args), seeds={"train": ckpt.config.seed, "split": ckpt.config.split.seed},
        config=ckpt.config.to_dict(), outputs=[str(args.out)],
        timings={"total_s": time.perf_counter() - t0},
    ).write(args.out.with_name(args.out.name + ".manifest.json"))
    log.info("encoded %d %s images into %s (%d bits)", len(index), args.split, args.out, index.nbits)
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    queries, database = load_index(args.query_index), load_index(args.db_index)
    if queries.nbits != database.nbits:
        raise ContractError(f"query index has {queries.nbits}-bit codes, database index {database.nbits}-bit")
    n = args.map_at or len(database)
    ks = sorted({k for k in args.topk if k <= len(database)})
    summary = {
        "bits": database.nbits,
        "num_queries": len(queries),
        "num_database": len(database),
        "map_at": n,
        "map": mean_ap(queries, database, n),
        "precision_at_k": dict(zip(map(str, ks), precision_at_topk(queries, database, ks))) if ks else {},
    }
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [args.out / "summary.json"]
    outputs[0].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.pr:
        pr_path, topk_path = args.out / "pr.csv", args.out / "precision_at_k.csv"
        with open(pr_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["radius", "recall", "precision"])
            for p in precision_recall_curve(queries, database):
                writer.writerow([p.threshold, repr(p.recall), repr(p.precision)])
        all_k = list(range(1, len(database) + 1))
        with open(topk_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "precision"])
            for k, v in zip(all_k, precision_at_topk(queries, database, all_k)):
                writer.writerow([k, repr(v)])
        outputs += [pr_path, topk_path]
    RunManifest(
        "eval", _args_dict(args), outputs=[str(p) for p in outputs],
        timings={"total_s": time.perf_counter() - t0},
    ).write(args.out / "manifest.json")
    print(f"mAP@{n} = {summary['map']:.4f}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vithash", description="Generate data, train hash models, encode images and evaluate retrieval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic class-conditional dataset")
    p.add_argument("--classes", type=_positive, default=2)
    p.add_argument("--per-class", type=_positive, default=100)
    p.add_argument("--size", type=_positive, default=16, help="image height and width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on the training split of a dataset")
    p.add_argument("--data", type=Path, required=True, help="THDS file, or CIFAR-10 binary batch (*.bin)")
    p.add_argument("--config", type=Path, help="INI config; defaults to the desk-scale config")
    p.add_argument("--seed", type=int, help="override the config's training seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="hash one split of a dataset into an index file")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "query", "database"), required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="score a query index against a database index")
    p.add_argument("--query-index", type=Path, required=True)
    p.add_argument("--db-index", type=Path, required=True)
    p.add_argument("--map-at", type=_positive, help="mAP cutoff N (default: whole database)")
    p.add_argument("--topk", type=_int_list, default=[1, 10, 100], help="comma-separated k values")
    p.add_argument("--pr", action="store_true", help="also write PR and precision@k curve CSVs")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"vithash {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"vithash {args.command}: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"vithash {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
