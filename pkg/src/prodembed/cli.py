"""Command-line driver.

    prodembed synth     --out DIR
    prodembed train     METHOD --config CFG --out DIR
    prodembed unify     --method UPSII2V --config CFG --out DIR
    prodembed eval      TASK --config CFG --out DIR [--force]
    prodembed neighbors TOKEN --method PSI2V --out DIR
    prodembed pipeline  --config CFG --out DIR

Exit codes: 0 success, 2 config/usage error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

from .core import (
    ConfigError,
    DataError,
    EmbeddingTable,
    NotFoundError,
    UsageError,
    is_si_token,
    load_table,
    save_table,
    top_k_neighbors,
)
from .evaluation import write_reports
from .ingest import load_catalog, load_events
from .pipeline import (
    METHODS,
    NEEDS_IMAGES,
    TASKS,
    UNIFIED_BASE,
    Dataset,
    PipelineConfig,
    TrainResult,
    check_inputs,
    default_config_text,
    evaluate,
    load_config,
    load_prices,
    load_table_checked,
    train_method,
)
from .synth import gen_world, read_ground_truth, write_world
from .unify import write_grid_trace

log = logging.getLogger("prodembed")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.paths = dataclasses.replace(cfg.paths, out=args.out)
    cfg.validate()
    return cfg


def _world_paths(cfg: PipelineConfig) -> PipelineConfig:
    """Point empty data paths at a synthetic world under ``out/world``."""
    p = cfg.paths
    if p.catalog:
        return cfg
    world = os.path.join(p.out, "world")
    cfg.paths = dataclasses.replace(
        p,
        catalog=os.path.join(world, "catalog.jsonl"),
        events=os.path.join(world, "events.jsonl"),
        images=os.path.join(world, "images.emb"),
        ground_truth=os.path.join(world, "ground_truth.jsonl"),
    )
    return cfg


def load_dataset(cfg: PipelineConfig, methods, tasks=()) -> Dataset:
    p = cfg.paths
    check_inputs(p, methods, tasks)
    catalog = load_catalog(p.catalog)
    ids = {r.product_id for r in catalog}
    events = load_events(p.events, ids) if p.events and os.path.exists(p.events) else []
    images = load_table(p.images) if p.images and os.path.exists(p.images) else None
    if images is not None and images.dimension != cfg.sgns.dimension and any(
        m in NEEDS_IMAGES for m in methods
    ):
        raise ConfigError(
            f"image vectors have dimension {images.dimension}, sgns dimension is {cfg.sgns.dimension}"
        )
    labels = None
    if p.ground_truth and os.path.exists(p.ground_truth):
        labels = read_ground_truth(p.ground_truth).return_labels()
    return Dataset(catalog, events, images, load_prices(p.catalog), labels)


def _table_path(out: str, method: str) -> str:
    return os.path.join(out, f"{method}.emb")


def _write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "objective"])
        for epoch, value in trace:
            w.writerow([epoch, f"{value:.9g}"])


def save_result(method: str, res: TrainResult, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    save_table(res.table, _table_path(out, method))
    if res.trace:
        _write_trace(res.trace, os.path.join(out, f"{method}.loss.csv"))
    user_table = res.extras.get("user_table")
    if user_table is not None:
        save_table(user_table, os.path.join(out, f"{method}.users.emb"))
    if res.extras.get("grid"):
        write_grid_trace(res.extras["grid"], os.path.join(out, f"{method}.grid.csv"))


def _cached(cfg: PipelineConfig, force: bool = False) -> dict[str, TrainResult]:
    """Already trained tables from the output directory (digest-checked)."""
    cache = {}
    digest = cfg.digest()
    for m in METHODS:
        path = _table_path(cfg.paths.out, m)
        if not os.path.exists(path):
            continue
        table = load_table_checked(path, digest, force)
        extras = {}
        users = os.path.join(cfg.paths.out, f"{m}.users.emb")
        if os.path.exists(users):
            extras["user_table"] = load_table_checked(users, digest, force)
        cache[m] = TrainResult(table, [], extras)
    return cache


# -- subcommands --------------------------------------------------------------


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = os.path.join(cfg.paths.out, "world") if not args.world_dir else args.world_dir
    world = gen_world(cfg.world)
    paths = write_world(world, out)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    method = args.method or args.target
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    cfg = _world_paths(cfg)
    data = load_dataset(cfg, [method])
    cache: dict[str, TrainResult] = {}
    res = train_method(method, data, cfg, cache)
    save_result(method, res, cfg.paths.out)
    for m, r in cache.items():
        if m != method and not m.startswith("_") and not os.path.exists(_table_path(cfg.paths.out, m)):
            save_result(m, r, cfg.paths.out)
    print(f"{method}\t{len(res.table)} tokens\t{_table_path(cfg.paths.out, method)}")
    return EXIT_OK


def cmd_unify(args, cfg: PipelineConfig) -> int:
    method = args.method or args.target or "UPSII2V"
    if method not in UNIFIED_BASE:
        raise UsageError(f"unify needs one of {', '.join(UNIFIED_BASE)}")
    cfg = _world_paths(cfg)
    data = load_dataset(cfg, [method])
    base_path = _table_path(cfg.paths.out, UNIFIED_BASE[method])
    if not os.path.exists(base_path):
        raise DataError(f"missing {UNIFIED_BASE[method]} table: {base_path} (run train first)")
    cache = _cached(cfg, args.force)
    cache.pop(method, None)  # always recompute the unified table itself
    res = train_method(method, data, cfg, cache)
    save_result(method, res, cfg.paths.out)
    print(f"{method}\tw_I={res.extras['w_image']:.2f}\tw_PSV={res.extras['w_psv']:.2f}")
    return EXIT_OK


def _report_path(out: str, task: str) -> str:
    return os.path.join(out, f"report_{task}.csv")


def run_eval(task: str, cfg: PipelineConfig, data: Dataset, cache, methods) -> str:
    tables = {m: cache[m] for m in methods}
    reports = evaluate(task, tables, data, cfg, cache)
    path = _report_path(cfg.paths.out, task)
    write_reports(reports, path)
    with open(path + ".digest", "w", encoding="utf-8") as fh:
        fh.write(cfg.digest() + "\n")
    return path


def cmd_eval(args, cfg: PipelineConfig) -> int:
    task = args.task or args.target
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    cfg = _world_paths(cfg)
    data = load_dataset(cfg, [], [task])
    cache = _cached(cfg, args.force)
    methods = [m for m in cfg.methods if m in cache]
    if not methods:
        raise DataError(f"no trained tables in {cfg.paths.out} (run train first)")
    print(run_eval(task, cfg, data, cache, methods))
    return EXIT_OK


def cmd_neighbors(args, cfg: PipelineConfig) -> int:
    token = args.target
    if not token:
        raise UsageError("neighbors needs a token")
    method = args.method or "PSI2V"
    path = _table_path(cfg.paths.out, method)
    if not os.path.exists(path):
        raise DataError(f"missing {method} table: {path}")
    table = load_table(path)
    si = {}
    cfg = _world_paths(cfg)
    if cfg.paths.catalog and os.path.exists(cfg.paths.catalog):
        si = {r.product_id: r.si for r in load_catalog(cfg.paths.catalog)}
    for rank, (tok, sim) in enumerate(
        top_k_neighbors(table, token, args.k, filter=lambda t: not is_si_token(t)), start=1
    ):
        attrs = " ".join(f"{k}={v}" for k, v in si.get(tok, {}).items())
        print(f"{rank}\t{tok}\t{sim:.4f}\t{attrs}")
    return EXIT_OK


def cmd_pipeline(args, cfg: PipelineConfig) -> int:
    """Synthesize (when no data paths are configured), train, evaluate."""
    synthetic = not cfg.paths.catalog
    cfg = _world_paths(cfg)
    if synthetic:
        write_world(gen_world(cfg.world), os.path.dirname(cfg.paths.catalog))
    tasks = args.tasks.split(",") if args.tasks else list(TASKS)
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}")
    data = load_dataset(cfg, cfg.methods, tasks)
    cache: dict[str, TrainResult] = {}
    for m in cfg.methods:
        res = train_method(m, data, cfg, cache)
        save_result(m, res, cfg.paths.out)
        print(f"trained {m}", flush=True)
    for t in tasks:
        print(run_eval(t, cfg, data, cache, cfg.methods), flush=True)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "unify": cmd_unify, "eval": cmd_eval,
    "neighbors": cmd_neighbors, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prodembed",
        description="Train and evaluate product embeddings.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config defaults (INI):\n\n" + default_config_text(),
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("target", nargs="?", help="method (train), task (eval) or token (neighbors)")
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="seed for every stochastic component")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--method", help="embedding method")
    parser.add_argument("--task", help="evaluation task")
    parser.add_argument("--tasks", help="comma-separated tasks for pipeline")
    parser.add_argument("--force", action="store_true", help="accept tables with another config digest")
    parser.add_argument("--world-dir", help="synth output directory (default OUT/world)")
    parser.add_argument("-k", type=int, default=10, help="neighbors to print")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
