"""Importance-weighted user-item matrix, NMF item graph, and DeepWalk sessions."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from ._rng import derive_state, next_uniform
from .core import DegenerateInputError, UsageError
from .ingest import Event
from .mf import InteractionMatrix, NmfConfig, nmf_factorize

log = logging.getLogger(__name__)

PRIORITY = {"click": 0, "bag": 1, "purchase": 2}


@dataclass(frozen=True)
class ImportanceWeights:
    click: float
    bag: float
    purchase: float

    def of(self, event_type: str) -> float:
        return getattr(self, event_type)


def event_priority_reduce(event_types: Iterable[str]) -> str:
    """Highest-priority event type (click < bag < purchase)."""
    best = None
    for t in event_types:
        if t not in PRIORITY:
            raise UsageError(f"unknown event type {t!r}")
        if best is None or PRIORITY[t] > PRIORITY[best]:
            best = t
    if best is None:
        raise UsageError("need at least one event")
    return best


def importance_from_counts(clicks: int, bags: int, purchases: int) -> ImportanceWeights:
    if clicks <= 0 or bags <= 0 or purchases <= 0:
        raise DegenerateInputError(
            f"importance needs every event type present (clicks={clicks}, bags={bags}, "
            f"purchases={purchases})"
        )
    return ImportanceWeights(1.0, clicks / bags, clicks / purchases)


def compute_importance(events: Iterable[Event]) -> ImportanceWeights:
    counts = Counter(e.event_type for e in events)
    return importance_from_counts(counts["click"], counts["bag"], counts["purchase"])


def build_weighted_matrix(events: Sequence[Event], weights: ImportanceWeights) -> InteractionMatrix:
    """One entry per interacting (user, product): importance of its top-priority event."""
    top: dict[tuple[str, str], int] = {}
    for e in events:
        key = (e.user_id, e.product_id)
        p = PRIORITY[e.event_type]
        if top.get(key, -1) < p:
            top[key] = p
    names = ("click", "bag", "purchase")
    return InteractionMatrix.from_triples((u, p, weights.of(names[k])) for (u, p), k in top.items())


class ItemGraph:
    """Undirected weighted product graph stored as symmetric CSR adjacency."""

    def __init__(self, nodes: Sequence[str], adjacency: sp.csr_matrix):
        adj = sp.csr_matrix(adjacency, dtype=np.float64)
        adj.eliminate_zeros()
        adj.sort_indices()
        if adj.shape != (len(nodes), len(nodes)):
            raise UsageError("adjacency shape does not match node count")
        if adj.nnz and adj.data.min() < 0:
            raise UsageError("edge weights must be nonnegative")
        if adj.diagonal().any():
            raise UsageError("self-loops are not allowed")
        if (abs(adj - adj.T) > 1e-12 * max(1.0, abs(adj).max() if adj.nnz else 1.0)).nnz:
            raise UsageError("adjacency must be symmetric")
        self.nodes = list(nodes)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self.adjacency = adj

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_edges(cls, nodes: Sequence[str], edges: Iterable[tuple[str, str, float]]) -> "ItemGraph":
        index = {n: i for i, n in enumerate(nodes)}
        rows, cols, vals = [], [], []
        for a, b, w in edges:
            i, j = index[a], index[b]
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        adj = sp.coo_matrix((vals, (rows, cols)), shape=(len(nodes), len(nodes))).tocsr()
        return cls(nodes, adj)

    def neighbors(self, node: str) -> dict[str, float]:
        i = self.index[node]
        lo, hi = self.adjacency.indptr[i], self.adjacency.indptr[i + 1]
        return {
            self.nodes[j]: float(w)
            for j, w in zip(self.adjacency.indices[lo:hi], self.adjacency.data[lo:hi])
        }

    def edges(self) -> Iterable[tuple[str, str, float]]:
        coo = sp.triu(self.adjacency, k=1).tocoo()
        for i, j, w in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
            yield self.nodes[i], self.nodes[j], w

    def components(self) -> np.ndarray:
        _, labels = sp.csgraph.connected_components(self.adjacency, directed=False)
        return labels

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for a, b, w in self.edges():
                fh.write(f"{a}\t{b}\t{w:.9g}\n")


def _top_k_mask(sims: np.ndarray, k: int) -> np.ndarray:
    # per row: positions of the k heaviest positive entries (ties by column order)
    n = sims.shape[1]
    if k >= n:
        return sims > 0
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(sims, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask & (sims > 0)


def graph_from_factors(nodes: Sequence[str], factors: np.ndarray, top_k: int = 20,
                       block: int = 1024) -> ItemGraph:
    """Edges weighted by factor dot products; top_k per node, symmetrized by union."""
    n = len(nodes)
    rows, cols = [], []
    for lo in range(0, n, block):
        sims = factors[lo : lo + block] @ factors.T
        sims[np.arange(sims.shape[0]), np.arange(lo, lo + sims.shape[0])] = -np.inf
        r, c = np.nonzero(_top_k_mask(sims, top_k))
        rows.append(r + lo)
        cols.append(c)
    r = np.concatenate(rows) if rows else np.empty(0, int)
    c = np.concatenate(cols) if cols else np.empty(0, int)
    keep = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n)).tocsr()
    keep = ((keep + keep.T) > 0).tocoo()
    w = np.einsum("nd,nd->n", factors[keep.row], factors[keep.col])
    adj = sp.coo_matrix((w, (keep.row, keep.col)), shape=(n, n)).tocsr()
    return ItemGraph(nodes, adj)


def build_item_graph(W: InteractionMatrix, rank: int, top_k: int = 20,
                     config: NmfConfig | None = None) -> ItemGraph:
    """Factorize W with NMF and link products by their factor dot products."""
    result = nmf_factorize(W.matrix, rank, config)
    graph = graph_from_factors(W.products, result.col_factors.T, top_k)
    log.info("item graph: %d nodes, %d edges", len(graph), graph.adjacency.nnz // 2)
    return graph


@numba.njit(cache=True)
def _walks(indptr, indices, weights, walks_per_node, walk_length, seed, out):
    n = indptr.shape[0] - 1
    state = np.zeros(1, dtype=np.uint64)
    for node in range(n):
        for w in range(walks_per_node):
            row = node * walks_per_node + w
            derive_state(seed, node, w, state)
            cur = node
            out[row, 0] = cur
            for step in range(1, walk_length):
                lo, hi = indptr[cur], indptr[cur + 1]
                if hi == lo:
                    break
                total = 0.0
                for e in range(lo, hi):
                    total += weights[e]
                u = next_uniform(state) * total
                nxt = indices[hi - 1]
                acc = 0.0
                for e in range(lo, hi):
                    acc += weights[e]
                    if u < acc:
                        nxt = indices[e]
                        break
                cur = nxt
                out[row, step] = cur


def deepwalk_walks(graph: ItemGraph, walks_per_node: int = 10, walk_length: int = 40,
                   seed: int = 0) -> list[list[str]]:
    """Weighted random walks ("simulated sessions") from every node.

    Walk ``w`` from node ``v`` is seeded by (seed, v, w) alone, so output is
    independent of generation order. Isolated nodes give length-1 walks.
    Walks are ordered node-major.
    """
    if len(graph) == 0:
        raise UsageError("graph has no nodes")
    if walk_length < 1 or walks_per_node < 1:
        raise UsageError("walk_length and walks_per_node must be >= 1")
    adj = graph.adjacency
    out = np.full((len(graph) * walks_per_node, walk_length), -1, dtype=np.int64)
    _walks(adj.indptr.astype(np.int64), adj.indices.astype(np.int64), adj.data,
           walks_per_node, walk_length, np.uint64(seed), out)
    nodes = graph.nodes
    return [[nodes[i] for i in row if i >= 0] for row in out.tolist()]


def save_walks(walks: Iterable[Sequence[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for walk in walks:
            fh.write(" ".join(walk) + "\n")
