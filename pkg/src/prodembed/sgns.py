"""Skip-gram with negative sampling, plus the Prod2Vec / ProdSI2Vec pair generators.

Pairs are enumerated exhaustively within each list (every ordered
centre/context combination); an optional sliding window restricts that for
long random walks. Training follows the classic word2vec update: per pair the
input vector of the centre and the output vectors of the context and K
negatives are moved along the gradient of

    log sigma(v_c . u_x) + sum_n log sigma(-v_c . u_n)

with negatives drawn from the pair-stream unigram distribution raised to
``exponent``. Input vectors are exported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numba
import numpy as np

from ._rng import next_uniform, rng_state
from .core import (
    ConfigError,
    DataError,
    DegenerateInputError,
    EmbeddingTable,
    ProductRecord,
    UsageError,
)

log = logging.getLogger(__name__)

class TrainingPair(NamedTuple):
    centre: str
    context: str


@dataclass
class SgnsConfig:
    dimension: int = 100
    negatives: int = 5
    exponent: float = 0.75
    learning_rate: float = 0.025
    min_learning_rate: float = 1e-4
    epochs: int = 5
    window: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.exponent <= 1:
            raise ConfigError(f"unigram exponent must be in (0, 1], got {self.exponent}")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.dimension < 1 or self.epochs < 1:
            raise ConfigError("dimension and epochs must be positive")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be >= 1 or None")


# -- pair generation ----------------------------------------------------------


def _index_pairs(n: int, window: int | None) -> Iterator[tuple[int, int]]:
    for i in range(n):
        for j in range(n):
            if i != j and (window is None or abs(i - j) <= window):
                yield i, j


def gen_pairs_prod2vec(
    lists: Iterable[Sequence[str]], window: int | None = None
) -> Iterator[TrainingPair]:
    """Every ordered (centre, context) pair of distinct positions in each list."""
    skipped = 0
    for tokens in lists:
        if len(tokens) < 2:
            skipped += 1
            continue
        for i, j in _index_pairs(len(tokens), window):
            yield TrainingPair(tokens[i], tokens[j])
    if skipped:
        log.info("prod2vec: skipped %d singleton lists", skipped)


def _si_lookup(catalog) -> Mapping[str, list[str]]:
    if isinstance(catalog, Mapping):
        return {
            pid: (rec.si_tokens() if isinstance(rec, ProductRecord) else list(rec))
            for pid, rec in catalog.items()
        }
    return {rec.product_id: rec.si_tokens() for rec in catalog}


def gen_pairs_prodsi2vec(
    lists: Iterable[Sequence[str]], catalog, window: int | None = None
) -> Iterator[TrainingPair]:
    """Product pairs expanded with product-SI and SI-SI pairs.

    For each product pair this yields, in order: (P_c, P_x), (P_c, SI_c) for
    each SI of the centre, (P_c, SI_x) for each SI of the context, and
    (SI_c, SI_x) for each combination. ``catalog`` is a sequence of
    ProductRecord or a mapping from product id to record / token list.
    """
    si = _si_lookup(catalog)
    for centre, context in gen_pairs_prod2vec(lists, window):
        sc, sx = si.get(centre, ()), si.get(context, ())
        yield TrainingPair(centre, context)
        for s in sc:
            yield TrainingPair(centre, s)
        for s in sx:
            yield TrainingPair(centre, s)
        for a in sc:
            for b in sx:
                yield TrainingPair(a, b)


@numba.njit(cache=True)
def _fill_pairs(flat, offsets, si_ids, si_len, window, out_c, out_x, count_only):
    n_out = 0
    for li in range(offsets.shape[0] - 1):
        lo, hi = offsets[li], offsets[li + 1]
        if hi - lo < 2:
            continue
        for i in range(lo, hi):
            for j in range(lo, hi):
                if i == j:
                    continue
                if window > 0 and abs(i - j) > window:
                    continue
                c, x = flat[i], flat[j]
                sc, sx = si_len[c], si_len[x]
                if count_only:
                    n_out += 1 + sc + sx + sc * sx
                    continue
                out_c[n_out] = c
                out_x[n_out] = x
                n_out += 1
                for a in range(sc):
                    out_c[n_out] = c
                    out_x[n_out] = si_ids[c, a]
                    n_out += 1
                for b in range(sx):
                    out_c[n_out] = c
                    out_x[n_out] = si_ids[x, b]
                    n_out += 1
                for a in range(sc):
                    for b in range(sx):
                        out_c[n_out] = si_ids[c, a]
                        out_x[n_out] = si_ids[x, b]
                        n_out += 1
    return n_out


@dataclass
class PairCorpus:
    """A materialized pair stream over an integer vocabulary."""

    vocab: list[str]
    centres: np.ndarray
    contexts: np.ndarray
    singletons: int = 0

    def __len__(self) -> int:
        return len(self.centres)

    def __iter__(self) -> Iterator[TrainingPair]:
        v = self.vocab
        for c, x in zip(self.centres.tolist(), self.contexts.tolist()):
            yield TrainingPair(v[c], v[x])

    def counts(self) -> np.ndarray:
        n = len(self.vocab)
        return np.bincount(self.centres, minlength=n) + np.bincount(self.contexts, minlength=n)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "PairCorpus":
        pairs = list(pairs)
        vocab = sorted({t for p in pairs for t in p})
        index = {t: i for i, t in enumerate(vocab)}
        c = np.fromiter((index[p[0]] for p in pairs), np.int32, len(pairs))
        x = np.fromiter((index[p[1]] for p in pairs), np.int32, len(pairs))
        return cls(vocab, c, x)

    def dump_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for c, x in self:
                fh.write(f"{c}\t{x}\n")


def build_corpus(
    lists: Sequence[Sequence[str]], catalog=None, window: int | None = None
) -> PairCorpus:
    """Materialize the Prod2Vec pair stream, or ProdSI2Vec when ``catalog`` is given.

    Pair order matches ``gen_pairs_prod2vec`` / ``gen_pairs_prodsi2vec``;
    the vocabulary is sorted and contains only tokens that occur in a pair.
    """
    lists = [list(l) for l in lists]
    usable = [l for l in lists if len(l) >= 2]
    singletons = len(lists) - len(usable)
    si = _si_lookup(catalog) if catalog is not None else {}
    products = sorted({p for l in usable for p in l})
    si_vocab = sorted({s for p in products for s in si.get(p, ())})
    vocab = products + si_vocab
    if set(products) & set(si_vocab):
        raise DataError("product ids collide with side-information tokens")
    index = {t: i for i, t in enumerate(vocab)}
    n_prod = len(products)
    si_ids = np.full((max(len(vocab), 1), 6), -1, dtype=np.int32)
    si_len = np.zeros(max(len(vocab), 1), dtype=np.int32)
    for p in products:
        toks = si.get(p, ())
        if len(toks) > 6:
            raise DataError(f"product {p!r} has more than 6 SI tokens")
        i = index[p]
        si_len[i] = len(toks)
        si_ids[i, : len(toks)] = [index[s] for s in toks]
    flat = np.fromiter((index[p] for l in usable for p in l), np.int32)
    offsets = np.zeros(len(usable) + 1, dtype=np.int64)
    np.cumsum([len(l) for l in usable], out=offsets[1:])
    w = 0 if window is None else int(window)
    empty = np.empty(0, dtype=np.int32)
    total = _fill_pairs(flat, offsets, si_ids, si_len, w, empty, empty, True)
    centres = np.empty(total, dtype=np.int32)
    contexts = np.empty(total, dtype=np.int32)
    _fill_pairs(flat, offsets, si_ids, si_len, w, centres, contexts, False)
    log.info("pair corpus: %d pairs, %d products, %d SI tokens", total, n_prod, len(si_vocab))
    return PairCorpus(vocab, centres, contexts, singletons)


# -- negative sampling --------------------------------------------------------


class UnigramSampler:
    """Draws token indices with P(i) proportional to counts[i] ** exponent.

    Zero-count tokens are never drawn. Exponent 0 gives a uniform sampler
    over tokens with positive count.
    """

    def __init__(self, counts, exponent: float = 0.75, seed: int = 0):
        if isinstance(counts, Mapping):
            self.tokens = list(counts)
            counts = np.array([counts[t] for t in self.tokens], dtype=np.float64)
        else:
            counts = np.asarray(counts, dtype=np.float64)
            self.tokens = None
        if counts.size == 0 or not np.any(counts > 0):
            raise DegenerateInputError("negative sampler needs at least one positive count")
        if np.any(counts < 0):
            raise UsageError("counts must be nonnegative")
        weights = np.where(counts > 0, counts ** exponent, 0.0)
        self.probabilities = weights / weights.sum()
        self._cdf = np.cumsum(self.probabilities)
        self._cdf[-1] = 1.0
        self.rng = np.random.default_rng(seed)

    def draw(self, size) -> np.ndarray:
        u = self.rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        return np.minimum(idx, len(self._cdf) - 1).astype(np.int32)

    def draw_tokens(self, size: int) -> list:
        if self.tokens is None:
            raise UsageError("sampler was built from an array; use draw()")
        return [self.tokens[i] for i in self.draw(size)]


def negative_sample(counts, exponent: float = 0.75, seed: int = 0) -> UnigramSampler:
    return UnigramSampler(counts, exponent, seed)


# -- objective and gradients (reference path) --------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pair_objective(v_c: np.ndarray, u_x: np.ndarray, u_negs: np.ndarray) -> float:
    """log sigma(v_c . u_x) + sum over rows n of log sigma(-v_c . u_n)."""
    u_negs = np.atleast_2d(u_negs)
    return float(_log_sigmoid(v_c @ u_x) + np.sum(_log_sigmoid(-(u_negs @ v_c))))


def pair_gradient(v_c, u_x, u_negs):
    """Gradient of ``pair_objective`` w.r.t. (v_c, u_x, each u_n)."""
    u_negs = np.atleast_2d(u_negs)
    g_pos = 1.0 - _sigmoid(v_c @ u_x)
    g_neg = _sigmoid(u_negs @ v_c)
    d_vc = g_pos * u_x - g_neg @ u_negs
    d_ux = g_pos * v_c
    d_un = -g_neg[:, None] * v_c[None, :]
    return d_vc, d_ux, d_un


# -- training -----------------------------------------------------------------


def alias_table(probabilities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias tables for O(1) sampling from a discrete distribution."""
    n = len(probabilities)
    scaled = np.asarray(probabilities, dtype=np.float64) * n
    accept = np.zeros(n, dtype=np.float64)
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        accept[s] = scaled[s]
        alias[s] = l
        scaled[l] -= 1.0 - scaled[s]
        (small if scaled[l] < 1.0 else large).append(l)
    for i in large + small:
        accept[i] = 1.0
        alias[i] = i
    return accept, alias


@numba.njit(cache=True)
def _draw_negative(accept, alias, state):
    u = next_uniform(state) * accept.shape[0]
    i = int(u)
    if i >= accept.shape[0]:
        i = accept.shape[0] - 1
    if u - i < accept[i]:
        return i
    return alias[i]


@numba.njit(cache=True, fastmath=True)
def _pair_update(w_in, w_out, c, x, negs, lr, grad):
    """In-place ascent step for one pair; returns the pair objective before the step."""
    d = w_in.shape[1]
    for a in range(d):
        grad[a] = 0.0
    objective = 0.0
    for s in range(negs.shape[0] + 1):
        tgt = x if s == 0 else negs[s - 1]
        f = np.float32(0.0)
        for a in range(d):
            f += w_in[c, a] * w_out[tgt, a]
        sig = 1.0 / (1.0 + np.exp(-min(max(float(f), -30.0), 30.0)))
        if s == 0:
            objective += np.log(sig)
            g = np.float32((1.0 - sig) * lr)
        else:
            objective += np.log(1.0 - sig)
            g = np.float32(-sig * lr)
        for a in range(d):
            grad[a] += g * w_out[tgt, a]
            w_out[tgt, a] += g * w_in[c, a]
    for a in range(d):
        w_in[c, a] += grad[a]
    return objective


@numba.njit(cache=True)
def _sgns_epoch(w_in, w_out, centres, contexts, order, accept, alias, state, k, lr0, lr1, done, total):
    grad = np.zeros(w_in.shape[1], dtype=np.float32)
    negs = np.zeros(k, dtype=np.int64)
    objective = 0.0
    for t in range(order.shape[0]):
        i = order[t]
        lr = lr0 - (lr0 - lr1) * ((done + t) / total)
        for s in range(k):
            negs[s] = _draw_negative(accept, alias, state)
        objective += _pair_update(w_in, w_out, centres[i], contexts[i], negs, lr, grad)
    return objective


def sgns_step(w_in, w_out, centre: int, context: int, negatives, learning_rate: float) -> float:
    """One in-place training update for a single pair with fixed negatives.

    Returns the pair objective evaluated before the update.
    """
    negs = np.asarray(negatives, dtype=np.int64)
    grad = np.zeros(w_in.shape[1], dtype=w_in.dtype)
    return _pair_update(w_in, w_out, centre, context, negs, learning_rate, grad)


@dataclass
class SgnsModel:
    vocab: list[str]
    input_vectors: np.ndarray
    output_vectors: np.ndarray
    config: SgnsConfig
    loss_trace: list[float] = field(default_factory=list)

    def table(self, metadata: Mapping[str, str] | None = None) -> EmbeddingTable:
        return EmbeddingTable(self.vocab, self.input_vectors, metadata)


def init_vectors(n: int, d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    w_in = ((rng.random((n, d)) - 0.5) / d).astype(np.float32)
    w_out = np.zeros((n, d), dtype=np.float32)
    return w_in, w_out


def train_sgns(corpus: PairCorpus, config: SgnsConfig) -> SgnsModel:
    """Train on a materialized corpus; ``loss_trace`` holds the mean per-pair objective per epoch."""
    n_pairs = len(corpus)
    if n_pairs == 0:
        raise DataError("empty pair stream")
    n_vocab = len(corpus.vocab)
    w_in, w_out = init_vectors(n_vocab, config.dimension, config.seed)
    accept, alias = alias_table(UnigramSampler(corpus.counts(), config.exponent).probabilities)
    order_rng = np.random.default_rng(config.seed + 2)
    state = rng_state(config.seed + 1)
    total = float(n_pairs * config.epochs)
    trace = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n_pairs)
        objective = _sgns_epoch(
            w_in, w_out, corpus.centres, corpus.contexts, perm, accept, alias, state, config.negatives,
            config.learning_rate, config.min_learning_rate, float(epoch * n_pairs), total,
        )
        trace.append(objective / n_pairs)
        log.info("sgns epoch %d: mean pair objective %.4f", epoch + 1, trace[-1])
    if not np.all(np.isfinite(w_in)):
        raise DataError("training diverged (non-finite vectors); lower the learning rate")
    return SgnsModel(list(corpus.vocab), w_in, w_out, config, trace)


def sgns_train(pairs, config: SgnsConfig | None = None) -> EmbeddingTable:
    """Train on a pair stream (PairCorpus or iterable of pairs); return input vectors."""
    config = config or SgnsConfig()
    corpus = pairs if isinstance(pairs, PairCorpus) else PairCorpus.from_pairs(pairs)
    return train_sgns(corpus, config).table({"method": "sgns"})
