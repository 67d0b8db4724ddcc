"""Combine a word2vec-family table with image vectors into unified embeddings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ConfigError, DataError, EmbeddingTable, UsageError, is_si_token

log = logging.getLogger(__name__)

METHODS = ("weighted_average", "additive", "hadamard", "max_pool")


@dataclass
class UnifyConfig:
    method: str = "weighted_average"
    w_image: float = 0.1
    w_psv: float = 0.9
    normalize: bool = True
    grid_step: float = 0.1
    validation_task: str = "clicked_purchased"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown unify method {self.method!r}; choose from {METHODS}")
        if self.w_image < 0 or self.w_psv < 0:
            raise ConfigError("unify weights must be nonnegative")


def _normalized(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def unify(image: EmbeddingTable, psv: EmbeddingTable, config: UnifyConfig | None = None,
          metadata=None) -> EmbeddingTable:
    """Unified vectors over the product tokens present in both tables.

    ``image`` plays the role of the image table (weight ``w_image``) and
    ``psv`` the word2vec-family table (weight ``w_psv``). Rows are
    L2-normalized first unless ``config.normalize`` is off. SI tokens of
    either table pass through unchanged (``image`` wins on overlap).
    """
    config = config or UnifyConfig()
    if image.dimension != psv.dimension:
        raise UsageError(f"dimension mismatch: {image.dimension} vs {psv.dimension}")
    shared = [t for t in psv.tokens if t in image.index and not is_si_token(t)]
    if not shared:
        raise DataError("image and word2vec tables share no product tokens")
    a = image.vectors[[image.index[t] for t in shared]].astype(np.float64)
    b = psv.vectors[[psv.index[t] for t in shared]].astype(np.float64)
    if config.normalize:
        a, b = _normalized(a), _normalized(b)
    if config.method == "weighted_average":
        out = config.w_image * a + config.w_psv * b
    elif config.method == "additive":
        out = a + b
    elif config.method == "hadamard":
        out = a * b
    else:
        out = np.maximum(a, b)
    si = [t for t in image.tokens if is_si_token(t)]
    si += [t for t in psv.tokens if is_si_token(t) and t not in image.index]
    dropped = len(psv.product_tokens()) - len(shared)
    if dropped:
        log.info("unify: %d products lack an image vector and were dropped", dropped)
    tokens = shared + si
    if si:
        src = [image.vectors[image.index[t]] if t in image.index else psv.vectors[psv.index[t]]
               for t in si]
        out = np.vstack([out, np.array(src, dtype=np.float64)])
    return EmbeddingTable(tokens, out, metadata)


@dataclass
class GridPoint:
    w_image: float
    w_psv: float
    metric: float


def grid_search_weights(
    image: EmbeddingTable,
    psv: EmbeddingTable,
    metric: Callable[[EmbeddingTable], float],
    higher_is_better: bool = True,
    grid_step: float = 0.1,
    normalize: bool = True,
) -> tuple[float, float, list[GridPoint]]:
    """Search w_image over {0, step, ..., 1} with w_psv = 1 - w_image.

    Ties go to the smaller image weight. Returns (w_image, w_psv, trace).
    """
    if not 0 < grid_step <= 1:
        raise ConfigError("grid_step must be in (0, 1]")
    n = int(round(1.0 / grid_step))
    if not np.isclose(n * grid_step, 1.0):
        raise ConfigError("grid_step must divide 1")
    trace: list[GridPoint] = []
    best = None
    for i in range(n + 1):
        w_i = round(i * grid_step, 10)
        w_p = round(1.0 - w_i, 10)
        cfg = UnifyConfig("weighted_average", w_i, w_p, normalize)
        try:
            value = float(metric(unify(image, psv, cfg)))
        except Exception as exc:
            raise DataError(f"validation metric failed at w_image={w_i}, w_psv={w_p}: {exc}") from exc
        trace.append(GridPoint(w_i, w_p, value))
        better = best is None or (value > best.metric if higher_is_better else value < best.metric)
        if better:
            best = trace[-1]
    log.info("grid search: w_image=%.2f w_psv=%.2f metric=%.5g", best.w_image, best.w_psv, best.metric)
    return best.w_image, best.w_psv, trace


def write_grid_trace(trace: list[GridPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["w_I", "w_PSV", "metric"])
        for p in trace:
            w.writerow([f"{p.w_image:.2f}", f"{p.w_psv:.2f}", f"{p.metric:.9g}"])
