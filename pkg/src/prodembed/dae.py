"""Denoising autoencoder over one-hot side information.

Architecture V -> h1 -> h2 -> d -> h2 -> h1 -> V with sigmoid units everywhere
except the linear output layer. Training minimizes

    J = 1/(2N) * sum_i |x_i - Dec(Enc(x_i + scale * u_i))|^2,   u ~ U[0, 1)

and a product's embedding is Enc(x_i) on the clean input.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import ConfigError, DataError, EmbeddingTable, ProductRecord, load_table, save_table

log = logging.getLogger(__name__)


class LayoutMismatchError(DataError):
    pass


class OneHotLayout:
    """Ordered SI vocabulary; token -> column index."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate token in one-hot layout")

    @property
    def width(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_catalog(cls, catalog: Sequence[ProductRecord]) -> "OneHotLayout":
        return cls(sorted({t for rec in catalog for t in rec.si_tokens()}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(t + "\n" for t in self.tokens)

    @classmethod
    def load(cls, path) -> "OneHotLayout":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def one_hot_encode(record: ProductRecord, layout: OneHotLayout) -> np.ndarray:
    x = np.zeros(layout.width)
    for token in record.si_tokens():
        try:
            x[layout.index[token]] = 1.0
        except KeyError:
            raise LayoutMismatchError(
                f"token {token!r} of product {record.product_id!r} not in layout"
            ) from None
    return x


def encode_catalog(catalog: Sequence[ProductRecord], layout: OneHotLayout) -> np.ndarray:
    return np.array([one_hot_encode(r, layout) for r in catalog]).reshape(len(catalog), layout.width)


def corrupt(x: np.ndarray, scale: float = 0.5, seed=None) -> np.ndarray:
    """Additive uniform noise: x + scale * U[0, 1). ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if scale == 0:
        return x.copy()
    return x + scale * rng.random(x.shape)


@dataclass
class DaeConfig:
    dimension: int = 100
    hidden: tuple[int, int] = (512, 256)
    corruption: float = 0.5
    learning_rate: float = 0.5
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0

    def widths(self, vocab: int) -> list[int]:
        """Layer widths, hidden sizes shrunk by vocab/512 when vocab < 512."""
        if vocab < self.dimension:
            raise ConfigError(
                f"one-hot width {vocab} is smaller than embedding dimension {self.dimension}"
            )
        h1, h2 = self.hidden
        if vocab < 512:
            h1 = round(h1 * vocab / 512)
            h2 = round(h2 * vocab / 512)
        h1, h2 = max(h1, self.dimension), max(h2, self.dimension)
        return [vocab, h1, h2, self.dimension, h2, h1, vocab]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class DaeModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    config: DaeConfig
    loss_trace: list[float] = field(default_factory=list)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def initialize(cls, vocab: int, config: DaeConfig) -> "DaeModel":
        rng = np.random.default_rng(config.seed)
        widths = config.widths(vocab)
        weights, biases = [], []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-limit, limit, (n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, config)

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer, input first."""
        acts = [x]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if k == last else _sigmoid(z))
        return acts

    def encode(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w, b in zip(self.weights[:3], self.biases[:3]):
            h = _sigmoid(h @ w + b)
        return h

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[-1]


def dae_loss(model: DaeModel, x: np.ndarray, x_corr: np.ndarray) -> float:
    """J = 1/(2N) sum_i |x_i - Dec(Enc(x_corr_i))|^2"""
    r = model.reconstruct(x_corr) - x
    return float(np.sum(r * r) / (2 * x.shape[0]))


def dae_gradients(model: DaeModel, x: np.ndarray, x_corr: np.ndarray):
    """Loss and gradients (dW list, db list) by backpropagation."""
    acts = model.forward(x_corr)
    n = x.shape[0]
    r = acts[-1] - x
    loss = float(np.sum(r * r) / (2 * n))
    delta = r / n
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            a = acts[k]
            delta = (delta @ model.weights[k].T) * a * (1.0 - a)
    return loss, grads_w, grads_b


def dae_train(
    catalog: Sequence[ProductRecord],
    layout: OneHotLayout | None = None,
    config: DaeConfig | None = None,
) -> tuple[DaeModel, EmbeddingTable]:
    """Mini-batch gradient descent (with momentum) on the denoising loss.

    Returns the model, whose ``loss_trace`` holds the mean training loss per
    epoch, and the table of clean-input encoder outputs per product.
    """
    config = config or DaeConfig()
    if not catalog:
        raise DataError("empty catalog")
    layout = layout or OneHotLayout.from_catalog(catalog)
    X = encode_catalog(catalog, layout)
    model = DaeModel.initialize(layout.width, config)
    rng = np.random.default_rng(config.seed + 1)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    n = X.shape[0]
    bs = max(1, min(config.batch_size, n))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            xb = X[order[lo : lo + bs]]
            xc = corrupt(xb, config.corruption, rng)
            loss, gw, gb = dae_gradients(model, xb, xc)
            total += loss * len(xb)
            for k in range(len(model.weights)):
                vel_w[k] = config.momentum * vel_w[k] - config.learning_rate * gw[k]
                vel_b[k] = config.momentum * vel_b[k] - config.learning_rate * gb[k]
                model.weights[k] += vel_w[k]
                model.biases[k] += vel_b[k]
        model.loss_trace.append(total / n)
        log.debug("dae epoch %d: loss %.5f", epoch + 1, model.loss_trace[-1])
    if not all(np.all(np.isfinite(w)) for w in model.weights):
        raise DataError("DAE training diverged; lower the learning rate")
    table = EmbeddingTable([r.product_id for r in catalog], model.encode(X))
    return model, table


def save_dae(model: DaeModel, layout: OneHotLayout, directory) -> None:
    """Layout as text plus one store-format matrix per parameter."""
    os.makedirs(directory, exist_ok=True)
    layout.save(os.path.join(directory, "layout.txt"))
    params = {f"W{k}": w for k, w in enumerate(model.weights)}
    params.update({f"b{k}": b[None, :] for k, b in enumerate(model.biases)})
    for name, mat in params.items():
        rows = [f"{name}/{i}" for i in range(mat.shape[0])]
        save_table(EmbeddingTable(rows, mat), os.path.join(directory, f"{name}.emb"))
    cfg = asdict(model.config)
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)


def load_dae(directory) -> tuple[DaeModel, OneHotLayout]:
    layout = OneHotLayout.load(os.path.join(directory, "layout.txt"))
    with open(os.path.join(directory, "config.json"), encoding="utf-8") as fh:
        cfg = json.load(fh)
    cfg["hidden"] = tuple(cfg["hidden"])
    config = DaeConfig(**cfg)
    weights, biases = [], []
    for k in range(6):
        weights.append(load_table(os.path.join(directory, f"W{k}.emb")).vectors.astype(np.float64))
        biases.append(load_table(os.path.join(directory, f"b{k}.emb")).vectors[0].astype(np.float64))
    return DaeModel(weights, biases, config), layout
