"""Matrix factorization: BPR-MF over interaction counts, and multiplicative-update NMF."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from ._rng import next_below, rng_state
from .core import (
    ConfigError,
    DataError,
    DegenerateInputError,
    EmbeddingTable,
    NotFoundError,
    UsageError,
)
from .ingest import Event

log = logging.getLogger(__name__)


@dataclass
class InteractionMatrix:
    """Sparse user x product matrix of nonnegative values with index maps."""

    matrix: sp.csr_matrix
    users: list[str]
    products: list[str]

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape != (len(self.users), len(self.products)):
            raise UsageError(f"matrix shape {m.shape} does not match index maps")
        if m.nnz and m.data.min() < 0:
            raise UsageError("interaction values must be nonnegative")
        self.matrix = m
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.product_index = {p: i for i, p in enumerate(self.products)}

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, float]], users=None, products=None):
        triples = list(triples)
        users = list(users) if users is not None else sorted({t[0] for t in triples})
        products = list(products) if products is not None else sorted({t[1] for t in triples})
        ui = {u: i for i, u in enumerate(users)}
        pi = {p: i for i, p in enumerate(products)}
        rows = np.array([ui[t[0]] for t in triples], dtype=np.int64)
        cols = np.array([pi[t[1]] for t in triples], dtype=np.int64)
        vals = np.array([t[2] for t in triples], dtype=np.float64)
        m = sp.coo_matrix((vals, (rows, cols)), shape=(len(users), len(products))).tocsr()
        return cls(m, users, products)

    @classmethod
    def from_events(cls, events: Sequence[Event]) -> "InteractionMatrix":
        """Raw count of all clicks, bags and purchases per (user, product)."""
        return cls.from_triples((e.user_id, e.product_id, 1.0) for e in events)


# -- BPR ----------------------------------------------------------------------


@dataclass
class BprConfig:
    dimension: int = 100
    learning_rate: float = 0.05
    reg: float = 0.01
    epochs: int = 20
    init_std: float = 0.01
    validation_triples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1 or self.epochs < 1:
            raise ConfigError("dimension and epochs must be positive")
        if self.learning_rate <= 0 or self.reg < 0:
            raise ConfigError("learning_rate must be > 0 and reg >= 0")


@dataclass
class BprModel:
    alpha: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    users: list[str]
    products: list[str]
    reg: float = 0.01
    loss_trace: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.product_index = {p: i for i, p in enumerate(self.products)}

    def _ids(self, u: str, p: str) -> tuple[int, int]:
        try:
            return self.user_index[u], self.product_index[p]
        except KeyError as exc:
            raise NotFoundError(f"unknown id {exc.args[0]!r}") from None

    def product_table(self, metadata=None) -> EmbeddingTable:
        return EmbeddingTable(self.products, self.item_factors, metadata)

    def user_table(self, metadata=None) -> EmbeddingTable:
        return EmbeddingTable(self.users, self.user_factors, metadata)


def bpr_score(model: BprModel, u: str, p: str) -> float:
    """alpha + beta_u + beta_p + gamma_u . gamma_p"""
    ui, pi = model._ids(u, p)
    return float(
        model.alpha
        + model.user_bias[ui]
        + model.item_bias[pi]
        + model.user_factors[ui] @ model.item_factors[pi]
    )


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def triple_objective(gu, gi, gj, bi, bj, reg, alpha=0.0, bu=0.0) -> float:
    """log sigma(x_ui - x_uj) - reg * (|gu|^2 + |gi|^2 + |gj|^2) for one triple."""
    x_ui = alpha + bu + bi + gu @ gi
    x_uj = alpha + bu + bj + gu @ gj
    return float(_log_sigmoid(x_ui - x_uj) - reg * (gu @ gu + gi @ gi + gj @ gj))


def triple_gradient(gu, gi, gj, bi, bj, reg):
    """Gradient of ``triple_objective`` w.r.t. (gu, gi, gj, bi, bj)."""
    x = bi - bj + gu @ (gi - gj)
    e = 0.5 * (1.0 - np.tanh(0.5 * x))  # sigma(-x)
    return (
        e * (gi - gj) - 2 * reg * gu,
        e * gu - 2 * reg * gi,
        -e * gu - 2 * reg * gj,
        e,
        -e,
    )


@numba.njit(cache=True)
def _has(indices, lo, hi, j):
    while lo < hi:
        mid = (lo + hi) // 2
        v = indices[mid]
        if v == j:
            return True
        if v < j:
            lo = mid + 1
        else:
            hi = mid
    return False


@numba.njit(cache=True)
def _sample_negative(indptr, indices, u, n_items, state):
    lo, hi = indptr[u], indptr[u + 1]
    while True:
        j = next_below(state, n_items)
        if not _has(indices, lo, hi, j):
            return j


@numba.njit(cache=True)
def _bpr_epoch(indptr, indices, pos_users, pos_items, eligible, n_items,
               gu, gi, bi, lr, reg, n_steps, state):
    d = gu.shape[1]
    n_pos = pos_users.shape[0]
    for _ in range(n_steps):
        t = next_below(state, n_pos)
        u = pos_users[t]
        if not eligible[u]:
            continue
        i = pos_items[t]
        j = _sample_negative(indptr, indices, u, n_items, state)
        x = bi[i] - bi[j]
        for a in range(d):
            x += gu[u, a] * (gi[i, a] - gi[j, a])
        if x > 0:
            ex = np.exp(-x)
            e = ex / (1.0 + ex)
        else:
            e = 1.0 / (1.0 + np.exp(x))
        bi[i] += lr * e
        bi[j] -= lr * e
        for a in range(d):
            wu, wi, wj = gu[u, a], gi[i, a], gi[j, a]
            gu[u, a] += lr * (e * (wi - wj) - 2 * reg * wu)
            gi[i, a] += lr * (e * wu - 2 * reg * wi)
            gi[j, a] += lr * (-e * wu - 2 * reg * wj)


def sample_triples(matrix: InteractionMatrix, n: int, seed: int) -> np.ndarray:
    """``n`` (u, i, j) triples: i observed for u, j uniformly unobserved."""
    m = matrix.matrix
    n_items = m.shape[1]
    deg = np.diff(m.indptr)
    eligible = np.flatnonzero((deg > 0) & (deg < n_items))
    if len(eligible) == 0:
        raise DataError("no user has both observed and unobserved products")
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3), dtype=np.int64)
    for t in range(n):
        u = eligible[rng.integers(len(eligible))]
        row = m.indices[m.indptr[u] : m.indptr[u + 1]]
        i = row[rng.integers(len(row))]
        while True:
            j = rng.integers(n_items)
            if j not in row:
                break
        out[t] = (u, i, j)
    return out


def bpr_objective(model: BprModel, triples: np.ndarray) -> float:
    """Mean per-triple objective (log-likelihood minus L2 penalty) over ``triples``."""
    u, i, j = triples.T
    gu, gi, gj = model.user_factors[u], model.item_factors[i], model.item_factors[j]
    x = model.item_bias[i] - model.item_bias[j] + np.einsum("nd,nd->n", gu, gi - gj)
    penalty = model.reg * (np.sum(gu * gu, 1) + np.sum(gi * gi, 1) + np.sum(gj * gj, 1))
    return float(np.mean(_log_sigmoid(x) - penalty))


def bpr_train(matrix: InteractionMatrix, config: BprConfig | None = None) -> BprModel:
    """SGD ascent on the BPR criterion over uniformly sampled (u, i, j) triples.

    Each epoch draws ``nnz`` triples: a positive (u, i) uniformly from the
    observed entries, then j uniformly from u's unobserved products. Users
    who observed every product are skipped. ``loss_trace`` holds
    ``(epoch, mean objective)`` on a fixed validation triple set, epoch 0
    being the initialization.
    """
    config = config or BprConfig()
    m = matrix.matrix
    if m.nnz == 0:
        raise DegenerateInputError("interaction matrix is empty")
    n_users, n_items = m.shape
    deg = np.diff(m.indptr)
    eligible = (deg > 0) & (deg < n_items)
    full = int(np.sum(deg == n_items))
    if full:
        log.warning("bpr: skipping %d users who interacted with every product", full)
    if not eligible.any():
        raise DataError("no user has both observed and unobserved products")
    rng = np.random.default_rng(config.seed)
    d = config.dimension
    gu = rng.normal(0.0, config.init_std, (n_users, d))
    gi = rng.normal(0.0, config.init_std, (n_items, d))
    bi = np.zeros(n_items)
    model = BprModel(0.0, np.zeros(n_users), bi, gu, gi, list(matrix.users),
                     list(matrix.products), config.reg)
    validation = sample_triples(matrix, config.validation_triples, config.seed + 1)
    model.loss_trace.append((0, bpr_objective(model, validation)))
    coo = m.tocoo()
    pos_users = coo.row.astype(np.int64)
    pos_items = coo.col.astype(np.int64)
    state = rng_state(config.seed + 2)
    for epoch in range(1, config.epochs + 1):
        _bpr_epoch(m.indptr, m.indices, pos_users, pos_items, eligible, n_items,
                   gu, gi, bi, config.learning_rate, config.reg, m.nnz, state)
        model.loss_trace.append((epoch, bpr_objective(model, validation)))
        log.info("bpr epoch %d: validation objective %.4f", epoch, model.loss_trace[-1][1])
    if not (np.all(np.isfinite(gu)) and np.all(np.isfinite(gi))):
        raise DataError("BPR training diverged; lower the learning rate")
    return model


# -- NMF ----------------------------------------------------------------------


@dataclass
class NmfConfig:
    max_iter: int = 200
    tol: float = 1e-5
    seed: int = 0


@dataclass
class NmfResult:
    row_factors: np.ndarray  # (n_rows, rank)
    col_factors: np.ndarray  # (rank, n_cols)
    errors: list[float]


def _frobenius(X, W, H, sq_norm_x, exact: bool) -> float:
    if exact:
        R = (X.toarray() if sp.issparse(X) else X) - W @ H
        return float(np.sqrt(np.sum(R * R)))
    cross = np.sum((X @ H.T) * W) if sp.issparse(X) else np.sum((X @ H.T) * W)
    quad = np.sum((W.T @ W) * (H @ H.T))
    return float(np.sqrt(max(sq_norm_x - 2 * cross + quad, 0.0)))


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def nmf_factorize(
    matrix, rank: int, config: NmfConfig | None = None, callback=None
) -> NmfResult:
    """Frobenius NMF by Lee-Seung multiplicative updates.

    Runs ``max_iter`` iterations or until the relative improvement of the
    reconstruction error drops below ``tol``. ``callback(W, H, error)`` is
    invoked after every iteration. Small matrices use the exact residual for
    the error; large sparse ones use the expanded trace form.
    """
    config = config or NmfConfig()
    if rank < 1:
        raise UsageError("rank must be >= 1")
    X = sp.csr_matrix(matrix, dtype=np.float64) if sp.issparse(matrix) else np.asarray(matrix, np.float64)
    if X.ndim != 2:
        raise UsageError("NMF needs a 2-d matrix")
    data = X.data if sp.issparse(X) else X
    if data.size and np.min(data) < 0:
        raise UsageError("NMF input has a negative entry")
    if not data.size or not np.any(data > 0):
        raise DegenerateInputError("NMF input is all zeros")
    n, m = X.shape
    exact = n * m <= 1_000_000
    sq_norm_x = float(np.sum(data * data))
    rng = np.random.default_rng(config.seed)
    scale = np.sqrt(float(np.sum(data)) / (n * m) / rank)
    W = rng.random((n, rank)) * scale
    H = rng.random((rank, m)) * scale
    errors = [_frobenius(X, W, H, sq_norm_x, exact)]
    for it in range(config.max_iter):
        H *= _ratio(np.asarray(W.T @ X if not sp.issparse(X) else (X.T @ W).T), (W.T @ W) @ H)
        W *= _ratio(np.asarray(X @ H.T), W @ (H @ H.T))
        err = _frobenius(X, W, H, sq_norm_x, exact)
        errors.append(err)
        if callback is not None:
            callback(W, H, err)
        prev = errors[-2]
        if prev == 0 or (prev - err) / prev < config.tol:
            break
    log.info("nmf: %d iterations, error %.6g", len(errors) - 1, errors[-1])
    return NmfResult(W, H, errors)
