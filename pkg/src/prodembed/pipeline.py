"""Pipeline configuration and drivers: train the nine embedding methods,
unify, and run the evaluations over one dataset."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import ConfigError, DataError, EmbeddingTable, ProductRecord, load_table
from .dae import DaeConfig, dae_train
from .evaluation import (
    DEFAULT_KS,
    EvalReport,
    LogisticConfig,
    attribute_precision_at_k,
    build_return_features,
    carts_from_events,
    clicked_purchased_rank,
    coherent_windows,
    purchase_windows,
    return_predict_train_eval,
    sparse_hit_ratio,
    split_examples,
)
from .graph import build_item_graph, build_weighted_matrix, compute_importance, deepwalk_walks
from .ingest import Event, build_lifetime_lists, build_sessions, filter_events, read_lines
from .mf import BprConfig, InteractionMatrix, NmfConfig, bpr_train
from .sgns import SgnsConfig, build_corpus, train_sgns
from .synth import WorldConfig
from .unify import UnifyConfig, grid_search_weights, unify

log = logging.getLogger(__name__)

METHODS = ("BPR-MF", "DAE", "IE", "P2V", "PSI2V", "DWP2V", "DWPSI2V", "UPSII2V", "UDWPSII2V")
TASKS = ("attributes", "clicked_purchased", "sparse", "returns")
UNIFIED_BASE = {"UPSII2V": "PSI2V", "UDWPSII2V": "DWPSI2V"}
NEEDS_IMAGES = ("IE", "UPSII2V", "UDWPSII2V")
NEEDS_EVENTS = ("BPR-MF", "P2V", "PSI2V", "DWP2V", "DWPSI2V", "UPSII2V", "UDWPSII2V")
LIFETIME_EVENTS = ("bag", "purchase")


@dataclass
class Paths:
    catalog: str = ""
    events: str = ""
    images: str = ""
    ground_truth: str = ""
    out: str = "out"


@dataclass
class Word2VecConfig:
    min_purchases: int = 3
    window: int = 0  # 0: every ordered pair of the list


@dataclass
class DeepWalkConfig:
    rank: int = 0  # 0: the embedding dimension
    top_k: int = 20
    walks_per_node: int = 5
    walk_length: int = 20
    window: int = 2
    nmf_iter: int = 200
    nmf_tol: float = 1e-5


@dataclass
class EvalConfig:
    sample_size: int = 1000
    ks: tuple[int, ...] = DEFAULT_KS
    window: int = 14
    coherence_threshold: float = 0.6
    reference: str = "PSI2V"
    sparse_quantile: float = 0.05
    sparse_target: str = "next"
    return_delay_days: int = 14


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    sgns: SgnsConfig = field(default_factory=SgnsConfig)
    word2vec: Word2VecConfig = field(default_factory=Word2VecConfig)
    deepwalk: DeepWalkConfig = field(default_factory=DeepWalkConfig)
    deepwalk_sgns: SgnsConfig = field(default_factory=lambda: SgnsConfig(epochs=2))
    bpr: BprConfig = field(default_factory=BprConfig)
    dae: DaeConfig = field(default_factory=DaeConfig)
    unify: UnifyConfig = field(default_factory=UnifyConfig)
    grid_search: bool = False
    logistic: LogisticConfig = field(default_factory=LogisticConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.eval.reference not in METHODS:
            raise ConfigError(f"unknown reference method {self.eval.reference!r}")
        if self.eval.sparse_target not in ("next", "any"):
            raise ConfigError("eval.sparse_target must be 'next' or 'any'")
        if self.deepwalk.walk_length < 1 or self.deepwalk.walks_per_node < 1:
            raise ConfigError("deepwalk walk_length and walks_per_node must be >= 1")
        dims = {self.sgns.dimension, self.deepwalk_sgns.dimension}
        if len(dims) != 1:
            raise ConfigError("sgns and deepwalk_sgns dimensions must agree")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["paths"].pop("out")
        return d

    def digest(self) -> str:
        """sha256 over every setting except the output directory."""
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with ``seed`` propagated to every stochastic component."""
        cfg = dataclasses.replace(self, seed=seed)
        cfg.world = dataclasses.replace(self.world, seed=seed)
        cfg.sgns = dataclasses.replace(self.sgns, seed=seed)
        cfg.deepwalk_sgns = dataclasses.replace(self.deepwalk_sgns, seed=seed)
        cfg.bpr = dataclasses.replace(self.bpr, seed=seed)
        cfg.dae = dataclasses.replace(self.dae, seed=seed)
        cfg.logistic = dataclasses.replace(self.logistic, seed=seed)
        return cfg


SECTIONS = {
    "paths": "paths", "world": "world", "sgns": "sgns", "word2vec": "word2vec",
    "deepwalk": "deepwalk", "deepwalk_sgns": "deepwalk_sgns", "bpr": "bpr", "dae": "dae",
    "unify": "unify", "logistic": "logistic", "eval": "eval",
}


def _convert(raw: str, current, where: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [x.strip() for x in raw.replace(",", " ").split()]
            if current and isinstance(current[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        if current is None:
            return None if raw.strip().lower() in ("", "none") else int(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _apply(obj, items: Mapping[str, str], section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[key] = _convert(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Read an INI-style config; top-level keys go in a ``[pipeline]`` section."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base or PipelineConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "pipeline":
            cfg = _apply(cfg, items, section)
        elif section in SECTIONS:
            attr = SECTIONS[section]
            cfg = dataclasses.replace(cfg, **{attr: _apply(getattr(cfg, attr), items, section)})
        else:
            raise ConfigError(f"unknown config section [{section}]")
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def default_config_text() -> str:
    """Every default as INI, for ``--help`` output and as a template."""
    cfg = PipelineConfig()
    lines = ["[pipeline]", f"methods = {', '.join(cfg.methods)}", f"seed = {cfg.seed}",
             f"grid_search = {cfg.grid_search}"]
    for section, attr in SECTIONS.items():
        lines += ["", f"[{section}]"]
        for f in dataclasses.fields(getattr(cfg, attr)):
            value = getattr(getattr(cfg, attr), f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# -- data ---------------------------------------------------------------------


@dataclass
class Dataset:
    catalog: list[ProductRecord]
    events: list[Event]
    images: EmbeddingTable | None = None
    price: dict[str, float] = field(default_factory=dict)
    labels: dict[tuple[str, str, str], int] | None = None

    @classmethod
    def from_world(cls, world) -> "Dataset":
        return cls(world.catalog, world.events, world.images, world.price,
                   world.ground_truth.return_labels())


def load_prices(path) -> dict[str, float]:
    out = {}
    for line in read_lines(path):
        if line.strip():
            obj = json.loads(line)
            if "price" in obj:
                out[str(obj["product_id"])] = float(obj["price"])
    return out


def check_inputs(paths: Paths, methods, tasks=()) -> None:
    """Name the first required input file that is missing."""
    need = {"catalog"}
    if any(m in NEEDS_EVENTS for m in methods) or tasks:
        need.add("events")
    if any(m in NEEDS_IMAGES for m in methods):
        need.add("images")
    for key in ("catalog", "events", "images"):
        if key in need:
            path = getattr(paths, key)
            if not path:
                raise ConfigError(f"no {key} path configured")
            if not os.path.exists(path):
                raise DataError(f"missing {key} file: {path}")


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    table: EmbeddingTable
    trace: list[tuple[int, float]]
    extras: dict = field(default_factory=dict)


def lifetime_lists(events, min_purchases: int) -> list[list[str]]:
    lists = build_lifetime_lists(filter_events(events, LIFETIME_EVENTS), min_purchases)
    return [l.products() for l in lists]


def simulated_sessions(events, cfg: PipelineConfig) -> list[list[str]]:
    dw = cfg.deepwalk
    weights = compute_importance(events)
    W = build_weighted_matrix(events, weights)
    rank = dw.rank or cfg.sgns.dimension
    graph = build_item_graph(W, min(rank, min(W.matrix.shape)), dw.top_k,
                             NmfConfig(dw.nmf_iter, dw.nmf_tol, cfg.seed))
    return deepwalk_walks(graph, dw.walks_per_node, dw.walk_length, cfg.seed)


def _sgns_table(lists, catalog, window, sgns_cfg, name, digest) -> TrainResult:
    corpus = build_corpus(lists, catalog, window or None)
    model = train_sgns(corpus, sgns_cfg)
    table = model.table({"method": name, "digest": digest})
    return TrainResult(table, list(enumerate(model.loss_trace, start=1)),
                       {"pairs": len(corpus), "lists": len(lists)})


def train_method(method: str, data: Dataset, cfg: PipelineConfig,
                 cache: dict[str, TrainResult] | None = None) -> TrainResult:
    """Train ``method``; ``cache`` reuses already trained base tables."""
    if cache is not None and method in cache:
        return cache[method]
    digest = cfg.digest()
    meta = {"method": method, "digest": digest}
    if method == "IE":
        if data.images is None:
            raise DataError("IE needs an image-vector file")
        ids = {r.product_id for r in data.catalog}
        keep = [t for t in data.images.tokens if t in ids]
        missing = len(ids) - len(keep)
        if missing:
            log.warning("IE: %d catalog products have no image vector", missing)
        res = TrainResult(data.images.subset(keep).with_metadata(**meta), [], {"missing": missing})
    elif method == "BPR-MF":
        model = bpr_train(InteractionMatrix.from_events(data.events), cfg.bpr)
        res = TrainResult(model.product_table(meta), list(model.loss_trace),
                          {"user_table": model.user_table(meta)})
    elif method == "DAE":
        model, table = dae_train(data.catalog, None, cfg.dae)
        res = TrainResult(table.with_metadata(**meta), list(enumerate(model.loss_trace, start=1)))
    elif method in ("P2V", "PSI2V"):
        lists = lifetime_lists(data.events, cfg.word2vec.min_purchases)
        catalog = data.catalog if method == "PSI2V" else None
        res = _sgns_table(lists, catalog, cfg.word2vec.window, cfg.sgns, method, digest)
    elif method in ("DWP2V", "DWPSI2V"):
        if cache is not None and "_walks" in cache:
            walks = cache["_walks"]
        else:
            walks = simulated_sessions(data.events, cfg)
            if cache is not None:
                cache["_walks"] = walks
        catalog = data.catalog if method == "DWPSI2V" else None
        res = _sgns_table(walks, catalog, cfg.deepwalk.window, cfg.deepwalk_sgns, method, digest)
    elif method in UNIFIED_BASE:
        base = train_method(UNIFIED_BASE[method], data, cfg, cache)
        image = train_method("IE", data, cfg, cache)
        ucfg = cfg.unify
        trace = []
        if cfg.grid_search:
            metric = validation_metric(data, cfg, cache)
            w_i, w_p, trace = grid_search_weights(image.table, base.table, metric,
                                                  higher_is_better=False, grid_step=ucfg.grid_step,
                                                  normalize=ucfg.normalize)
            ucfg = dataclasses.replace(ucfg, method="weighted_average", w_image=w_i, w_psv=w_p)
        table = unify(image.table, base.table, ucfg, meta)
        res = TrainResult(table, [], {"grid": trace, "w_image": ucfg.w_image, "w_psv": ucfg.w_psv})
    else:
        raise ConfigError(f"unknown method {method!r}")
    if cache is not None:
        cache[method] = res
    return res


def validation_metric(data: Dataset, cfg: PipelineConfig, cache=None):
    """Mean clicked-purchased median rank (lower is better) for the grid search."""
    reference = train_method(cfg.eval.reference, data, cfg, cache).table
    sessions = build_sessions(data.events)
    windows = coherent_windows(purchase_windows(sessions, cfg.eval.window), reference,
                               cfg.eval.coherence_threshold)

    def metric(table: EmbeddingTable) -> float:
        report = clicked_purchased_rank(table, sessions, reference, cfg.eval.window,
                                        windows=windows)
        if not report.points:
            raise DataError("no sessions left after pruning")
        return float(np.mean([m for _, m in report.points]))

    return metric


# -- evaluation ---------------------------------------------------------------


def evaluate(task: str, tables: Mapping[str, TrainResult], data: Dataset,
             cfg: PipelineConfig, cache=None) -> list[EvalReport]:
    """One report per table (plus an embedding-free baseline for ``returns``)."""
    ec = cfg.eval
    digest = cfg.digest()
    reports: list[EvalReport] = []
    if task == "attributes":
        for name, res in tables.items():
            reports.append(attribute_precision_at_k(res.table, data.catalog, ec.sample_size, ec.ks,
                                                    seed=cfg.seed, name=name))
    elif task == "clicked_purchased":
        reference = train_method(ec.reference, data, cfg, cache).table
        sessions = build_sessions(data.events)
        all_windows = purchase_windows(sessions, ec.window)
        windows = coherent_windows(all_windows, reference, ec.coherence_threshold)
        if not windows:
            log.warning("clicked_purchased: every session was pruned at threshold %.2f",
                        ec.coherence_threshold)
        for name, res in tables.items():
            r = clicked_purchased_rank(res.table, sessions, reference, ec.window, windows=windows,
                                       name=name)
            r.counts["pruned"] = len(all_windows) - len(windows)
            reports.append(r)
    elif task == "sparse":
        sessions = build_sessions(data.events)
        products = [r.product_id for r in data.catalog]
        for name, res in tables.items():
            reports.append(sparse_hit_ratio(res.table, sessions, data.events, ec.sparse_quantile,
                                            ec.ks, products, ec.sparse_target, name))
    elif task == "returns":
        carts = carts_from_events(data.events, data.labels, data.price)
        if not carts:
            raise DataError("no labelled purchases for return prediction")
        variants = [("none", None, None)] + [
            (name, res.table, res.extras.get("user_table")) for name, res in tables.items()
        ]
        for name, ptable, utable in variants:
            examples, _ = build_return_features(carts, data.catalog, ptable, utable,
                                                delay=ec.return_delay_days * 86400)
            split = split_examples(examples, cfg.logistic)
            *_, report = return_predict_train_eval(examples, split, cfg.logistic, name)
            reports.append(report)
    else:
        raise ConfigError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    for r in reports:
        r.digest = digest
    return reports


def load_table_checked(path, digest: str, force: bool = False) -> EmbeddingTable:
    table = load_table(path)
    found = table.metadata.get("digest")
    if found != digest and not force:
        raise ConfigError(
            f"{path}: config digest {found or '(none)'} does not match {digest}; use --force to override"
        )
    return table
