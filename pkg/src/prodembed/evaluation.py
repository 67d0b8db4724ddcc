"""Downstream evaluations: attribute precision@k, clicked-purchased ranks,
sparse-product hit ratio, and cart return prediction."""

from __future__ import annotations

import bisect
import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    DataError,
    EmbeddingTable,
    ProductRecord,
    UsageError,
    is_product_token,
)
from .ingest import Event, Session

log = logging.getLogger(__name__)

ATTRIBUTES = ("brand", "basecolor", "priceband")
DEFAULT_KS = (1, 5, 10, 20, 50)


@dataclass
class EvalReport:
    """Metric series of one task for one embedding; ``x`` labels are strings."""

    task: str
    embedding: str
    points: list[tuple[str, float]]
    digest: str = ""
    counts: dict[str, int] = field(default_factory=dict)

    def value(self, x) -> float:
        key = str(x)
        for px, m in self.points:
            if px == key:
                return m
        raise KeyError(f"{self.task}: no point {key!r}")

    def series(self, prefix: str) -> list[tuple[int, float]]:
        """Points named ``prefix@<int>`` as (int, metric) pairs."""
        out = []
        for px, m in self.points:
            head, sep, tail = px.partition("@")
            if sep and head == prefix:
                out.append((int(tail), m))
        return out


def write_reports(reports: Iterable[EvalReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "embedding", "x", "metric"])
        for r in reports:
            for x, m in r.points:
                w.writerow([r.task, r.embedding, x, f"{m:.6f}"])


def read_reports(path) -> list[tuple[str, str, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["task"], r["embedding"], r["x"], float(r["metric"])) for r in csv.DictReader(fh)]


class ProductIndex:
    """Unit vectors of the product tokens of a table, for batched ranking."""

    def __init__(self, table: EmbeddingTable, allowed: Iterable[str] | None = None):
        allowed = set(allowed) if allowed is not None else None
        self.tokens = sorted(
            t for t in table.tokens if is_product_token(t) and (allowed is None or t in allowed)
        )
        if not self.tokens:
            raise DataError("table has no product tokens to rank")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        rows = [table.index[t] for t in self.tokens]
        v = table.vectors[rows].astype(np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            bad = self.tokens[int(np.argmax(norms[:, 0] == 0))]
            raise DataError(f"zero-norm vector for product {bad!r}")
        self.unit = v / norms

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def similarities(self, rows: np.ndarray) -> np.ndarray:
        return self.unit[rows] @ self.unit.T

    def ranks(self, queries: np.ndarray, targets: np.ndarray, block: int = 512) -> np.ndarray:
        """Rank (1-based) of each target in its query's neighbor list.

        The list orders every other product by descending cosine, ties by
        ascending token; the query itself is excluded.
        """
        queries = np.asarray(queries, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        out = np.empty(len(queries), dtype=np.int64)
        cols = np.arange(len(self))
        for lo in range(0, len(queries), block):
            q, t = queries[lo : lo + block], targets[lo : lo + block]
            sims = self.similarities(q)
            r = np.arange(len(q))
            sims[r, q] = -np.inf
            s_t = sims[r, t][:, None]
            greater = np.sum(sims > s_t, axis=1)
            ties = np.sum((sims == s_t) & (cols[None, :] < t[:, None]), axis=1)
            out[lo : lo + block] = 1 + greater + ties
        return out

    def top_k(self, queries: np.ndarray, k: int, block: int = 256) -> np.ndarray:
        """Indices of the ``k`` nearest products per query (query excluded)."""
        queries = np.asarray(queries, dtype=np.int64)
        k = min(k, len(self) - 1)
        out = np.empty((len(queries), k), dtype=np.int64)
        tie = np.broadcast_to(np.arange(len(self)), (min(block, len(queries)) or 1, len(self)))
        for lo in range(0, len(queries), block):
            q = queries[lo : lo + block]
            sims = self.similarities(q)
            sims[np.arange(len(q)), q] = -np.inf
            order = np.lexsort((tie[: len(q)], -sims), axis=-1)
            out[lo : lo + block] = order[:, :k]
        return out


# -- embeddings to attributes -------------------------------------------------


def attribute_precision_at_k(
    table: EmbeddingTable,
    catalog: Sequence[ProductRecord],
    sample_size: int = 1000,
    ks: Sequence[int] = DEFAULT_KS,
    attributes: Sequence[str] = ATTRIBUTES,
    seed: int = 0,
    name: str = "",
) -> EvalReport:
    """Mean fraction of a query's top-k neighbors sharing its attribute value.

    Points are labelled ``"<attribute>@<k>"``. Queries lacking an attribute
    are left out of that attribute's average.
    """
    by_id = {r.product_id: r for r in catalog}
    index = ProductIndex(table, by_id)
    rng = np.random.default_rng(seed)
    n_q = min(sample_size, len(index))
    queries = np.sort(rng.choice(len(index), n_q, replace=False))
    kmax = max(ks)
    if kmax > len(index) - 1:
        raise UsageError(f"k={kmax} exceeds the {len(index) - 1} available neighbors")
    neigh = index.top_k(queries, kmax)
    points, counts = [], {"queries": n_q}
    for attr in attributes:
        values = np.array([by_id[t].si.get(attr, "") for t in index.tokens], dtype=object)
        qv = values[queries]
        has = qv != ""
        counts[f"missing_{attr}"] = int(np.sum(~has))
        match = (values[neigh] == qv[:, None]) & has[:, None]
        for k in ks:
            prec = match[has, :k].mean(axis=1)
            points.append((f"{attr}@{k}", float(prec.mean()) if len(prec) else 0.0))
    return EvalReport("attribute_precision", name or table.metadata.get("method", ""), points,
                      table.metadata.get("digest", ""), counts)


# -- clicked / purchased similarity -------------------------------------------


def _users_with_purchases(sessions: Sequence[Session], minimum: int) -> set[str]:
    bought: dict[str, set[str]] = defaultdict(set)
    for s in sessions:
        for e in s.events:
            if e.event_type == "purchase":
                bought[s.user_id].add(e.product_id)
    return {u for u, ps in bought.items() if len(ps) >= minimum}


def purchase_windows(sessions: Sequence[Session], window: int = 14,
                     min_user_purchases: int = 3) -> list[tuple[str, str, list[str]]]:
    """(session id, purchased product, clicks before it, most recent first).

    Uses each session's first purchase; clicks on the purchased product
    itself are dropped; at most ``window`` clicks are kept.
    """
    users = _users_with_purchases(sessions, min_user_purchases)
    out = []
    for s in sessions:
        if s.user_id not in users:
            continue
        clicks: list[str] = []
        for e in s.events:
            if e.event_type == "purchase":
                recent = [c for c in reversed(clicks) if c != e.product_id][:window]
                if recent:
                    out.append((s.session_id, e.product_id, recent))
                break
            if e.event_type == "click":
                clicks.append(e.product_id)
    return out


def coherent_windows(windows, reference: EmbeddingTable, threshold: float = 0.6):
    """Keep windows whose median reference cosine (clicks vs purchase) is >= threshold."""
    ref = ProductIndex(reference)
    kept = []
    for w in windows:
        _, bought, clicks = w
        if bought not in ref:
            continue
        idx = [ref.index[c] for c in clicks if c in ref]
        if not idx:
            continue
        cos = ref.unit[idx] @ ref.unit[ref.index[bought]]
        if np.median(cos) >= threshold:
            kept.append(w)
    return kept


def clicked_purchased_rank(
    table: EmbeddingTable,
    sessions: Sequence[Session],
    reference_table: EmbeddingTable,
    window: int = 14,
    coherence_threshold: float = 0.6,
    min_user_purchases: int = 3,
    name: str = "",
    windows=None,
) -> EvalReport:
    """Median rank of the i-th most recent click around the purchased product.

    Sessions are pruned with ``reference_table`` so every evaluated table
    sees the same session set; pass precomputed ``windows`` to skip that
    step. Points are labelled ``"rank@<i>"``.
    """
    if windows is None:
        all_windows = purchase_windows(sessions, window, min_user_purchases)
        windows = coherent_windows(all_windows, reference_table, coherence_threshold)
        pruned = len(all_windows) - len(windows)
    else:
        pruned = 0
    index = ProductIndex(table)
    per_pos: list[list[tuple[int, int]]] = [[] for _ in range(window)]
    skipped = 0
    for _, bought, clicks in windows:
        if bought not in index:
            skipped += len(clicks)
            continue
        for i, c in enumerate(clicks[:window]):
            if c in index:
                per_pos[i].append((index.index[bought], index.index[c]))
            else:
                skipped += 1
    points = []
    for i, pairs in enumerate(per_pos, start=1):
        if not pairs:
            continue
        q, t = np.array(pairs).T
        points.append((f"rank@{i}", float(np.median(index.ranks(q, t)))))
    counts = {"sessions": len(windows), "pruned": pruned, "skipped_clicks": skipped}
    return EvalReport("clicked_purchased", name or table.metadata.get("method", ""), points,
                      table.metadata.get("digest", ""), counts)


# -- sparse products hit ratio ------------------------------------------------


def sparse_products(events: Iterable[Event], quantile: float = 0.05,
                    products: Iterable[str] | None = None) -> set[str]:
    """Least-clicked products whose cumulative click share stays within ``quantile``."""
    counts: dict[str, int] = defaultdict(int)
    if products is not None:
        for p in products:
            counts[p] = 0
    for e in events:
        if e.event_type == "click":
            counts[e.product_id] += 1
    total = sum(counts.values())
    budget = quantile * total
    out, acc = set(), 0
    for p, c in sorted(counts.items(), key=lambda kv: (kv[1], kv[0])):
        if acc + c > budget:
            break
        acc += c
        out.add(p)
    return out


def sparse_queries(sessions: Sequence[Session], sparse: set[str], target: str = "next"):
    """(query, target) click pairs for sparse-product clicks.

    ``target="next"`` pairs each sparse click with the following click;
    ``"any"`` with every later click of the session.
    """
    pairs = []
    for s in sessions:
        clicks = s.clicks()
        for t, q in enumerate(clicks[:-1]):
            if q not in sparse:
                continue
            later = clicks[t + 1 : t + 2] if target == "next" else clicks[t + 1 :]
            pairs.extend((q, x) for x in later if x != q)
    return pairs


def sparse_hit_ratio(
    table: EmbeddingTable,
    sessions: Sequence[Session],
    events: Sequence[Event],
    sparse_quantile: float = 0.05,
    ks: Sequence[int] = DEFAULT_KS,
    products: Iterable[str] | None = None,
    target: str = "next",
    name: str = "",
) -> EvalReport:
    """Average HR@k over sparse-click queries; uncovered queries count as misses.

    Points are labelled ``"hr@<k>"``.
    """
    sparse = sparse_products(events, sparse_quantile, products)
    pairs = sparse_queries(sessions, sparse, target)
    index = ProductIndex(table)
    covered = [(index.index[q], index.index[x]) for q, x in pairs if q in index and x in index]
    ranks = np.full(len(pairs), np.iinfo(np.int64).max, dtype=np.int64)
    if covered:
        q, x = np.array(covered).T
        ranks[: len(covered)] = index.ranks(q, x)
    n = max(len(pairs), 1)
    points = [(f"hr@{k}", float(np.sum(ranks <= k) / n)) for k in ks]
    counts = {"sparse_products": len(sparse), "queries": len(pairs),
              "uncovered": len(pairs) - len(covered)}
    return EvalReport("sparse_hit_ratio", name or table.metadata.get("method", ""), points,
                      table.metadata.get("digest", ""), counts)


# -- cart return prediction ---------------------------------------------------


@dataclass(frozen=True)
class Cart:
    user_id: str
    product_id: str
    session_id: str
    timestamp: int
    price: float
    returned: int


@dataclass
class ReturnExample:
    features: np.ndarray
    label: int
    cart: Cart


RETURN_DELAY = 14 * 86400


def carts_from_events(events: Sequence[Event], labels: Mapping[tuple[str, str, str], int] | None,
                      price: Mapping[str, float]) -> list[Cart]:
    """Purchase events as cart items, labelled from ``labels`` or the events' own field."""
    carts = []
    for e in events:
        if e.event_type != "purchase":
            continue
        if labels is not None:
            y = labels.get((e.user_id, e.product_id, e.session_id))
        else:
            y = e.returned
        if y is None:
            continue
        carts.append(Cart(e.user_id, e.product_id, e.session_id, e.timestamp,
                          float(price.get(e.product_id, 0.0)), int(y)))
    return carts


class _History:
    """Per-key cart history answering 'orders before t' and 'returns known before t'."""

    def __init__(self, delay: int):
        self.delay = delay
        self.ts: dict[str, list[int]] = defaultdict(list)
        self.returned: dict[str, list[float]] = defaultdict(list)
        self.revenue: dict[str, list[float]] = defaultdict(list)

    def add(self, key, ts, returned, revenue):
        self.ts[key].append(ts)
        self.returned[key].append(returned)
        self.revenue[key].append(revenue)

    def finalize(self):
        for key in self.ts:
            order = np.argsort(self.ts[key], kind="stable")
            ts = np.asarray(self.ts[key])[order]
            ret = np.asarray(self.returned[key], dtype=float)[order]
            rev = np.asarray(self.revenue[key], dtype=float)[order]
            self.ts[key] = ts.tolist()
            self.returned[key] = np.concatenate([[0.0], np.cumsum(ret)]).tolist()
            self.revenue[key] = np.concatenate([[0.0], np.cumsum(rev * ret)]).tolist()

    def before(self, key, t) -> int:
        return bisect.bisect_left(self.ts.get(key, []), t)

    def known(self, key, t) -> tuple[int, float, float]:
        n = bisect.bisect_left(self.ts.get(key, []), t - self.delay)
        if n == 0:
            return 0, 0.0, 0.0
        return n, self.returned[key][n], self.revenue[key][n]


def build_return_features(
    carts: Sequence[Cart],
    catalog: Sequence[ProductRecord],
    product_table: EmbeddingTable | None = None,
    user_table: EmbeddingTable | None = None,
    smoothing: float = 5.0,
    delay: int = RETURN_DELAY,
    user_vectors: bool = True,
) -> tuple[list[ReturnExample], int]:
    """Assemble return-prediction features in a fixed order.

    Groups: (1) user history: prior orders, known returns, returned
    revenue, return rate, mean prior priceband, history flag; (2) product:
    known return rate smoothed toward the global known rate, log prior
    orders, priceband one-hot; (3) order: cart size, log cart value, price share; (4) product vector
    and presence flag; (5) user vector (``user_table`` row, else mean of
    previously purchased product vectors) and presence flag. Outcomes only
    count once ``delay`` seconds have passed. Returns (examples, dropped).
    """
    by_id = {r.product_id: r for r in catalog}
    bands = sorted({r.si["priceband"] for r in catalog if "priceband" in r.si})
    band_index = {b: i for i, b in enumerate(bands)}
    d = product_table.dimension if product_table is not None else 0
    kept = [c for c in carts if c.product_id in by_id]
    dropped = len(carts) - len(kept)
    if dropped:
        log.warning("return features: dropped %d carts with unknown products", dropped)

    user_hist, prod_hist, all_hist = _History(delay), _History(delay), _History(delay)
    for c in kept:
        user_hist.add(c.user_id, c.timestamp, c.returned, c.price)
        prod_hist.add(c.product_id, c.timestamp, c.returned, c.price)
        all_hist.add("", c.timestamp, c.returned, c.price)
    user_hist.finalize()
    prod_hist.finalize()
    all_hist.finalize()

    band_of = {p: band_index.get(r.si.get("priceband", ""), -1) for p, r in by_id.items()}
    user_bands: dict[str, list[tuple[int, int]]] = defaultdict(list)
    user_bought: dict[str, list[tuple[int, str]]] = defaultdict(list)
    session_items: dict[str, list[Cart]] = defaultdict(list)
    for c in kept:
        user_bands[c.user_id].append((c.timestamp, band_of[c.product_id]))
        user_bought[c.user_id].append((c.timestamp, c.product_id))
        session_items[c.session_id].append(c)
    for v in user_bands.values():
        v.sort()
    for v in user_bought.values():
        v.sort()

    examples = []
    for c in kept:
        n_orders = user_hist.before(c.user_id, c.timestamp)
        n_known, n_ret, rev_ret = user_hist.known(c.user_id, c.timestamp)
        prior_bands = [b for t, b in user_bands[c.user_id] if t < c.timestamp and b >= 0]
        g1 = [
            np.log1p(n_orders), n_ret, np.log1p(rev_ret),
            n_ret / n_known if n_known else 0.0,
            float(np.mean(prior_bands)) if prior_bands else 0.0,
            1.0 if n_known else 0.0,
        ]
        p_orders = prod_hist.before(c.product_id, c.timestamp)
        p_known, p_ret, _ = prod_hist.known(c.product_id, c.timestamp)
        n_all, ret_all, _ = all_hist.known("", c.timestamp)
        base_rate = ret_all / n_all if n_all else 0.5
        onehot = np.zeros(len(bands))
        if band_of[c.product_id] >= 0:
            onehot[band_of[c.product_id]] = 1.0
        g2 = [(p_ret + smoothing * base_rate) / (p_known + smoothing), np.log1p(p_orders), *onehot]
        items = session_items[c.session_id]
        total = sum(i.price for i in items)
        g3 = [float(len(items)), np.log1p(total), c.price / total if total else 0.0]
        feats = g1 + g2 + g3
        if product_table is not None:
            if c.product_id in product_table:
                feats += [*product_table[c.product_id], 1.0]
            else:
                feats += [0.0] * d + [0.0]
            if not user_vectors:
                examples.append(ReturnExample(np.asarray(feats, dtype=np.float64), c.returned, c))
                continue
            uvec = None
            if user_table is not None and c.user_id in user_table:
                uvec = user_table[c.user_id]
            elif user_table is None:
                prior = [p for t, p in user_bought[c.user_id] if t < c.timestamp and p in product_table]
                if prior:
                    uvec = np.mean([product_table[p] for p in prior], axis=0)
            feats += [*uvec, 1.0] if uvec is not None else [0.0] * d + [0.0]
        examples.append(ReturnExample(np.asarray(feats, dtype=np.float64), c.returned, c))
    return examples, dropped


@dataclass
class LogisticConfig:
    learning_rate: float = 1.0  # multiple of 1/L, L the gradient's Lipschitz constant
    iterations: int = 2000
    l2: float = 1e-3
    threshold: float = 0.5
    train_fraction: float = 0.7
    split: str = "random"  # or "temporal": train on the earliest carts
    seed: int = 0


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    threshold: float = 0.5

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = ((X - self.mean) / self.scale) @ self.weights + self.bias
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)


def fit_logistic(X: np.ndarray, y: np.ndarray, config: LogisticConfig | None = None) -> LogisticModel:
    """L2-regularized logistic regression by accelerated (Nesterov) gradient descent.

    Features are standardized first. The step is ``learning_rate / L`` with
    L = |Z|_2^2 / (4n) + l2, which keeps descent stable however collinear
    the embedding columns are.
    """
    config = config or LogisticConfig()
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DataError("training split has a single class")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    n = len(y)
    Z = np.hstack([(X - mean) / scale, np.ones((n, 1))])
    lipschitz = np.linalg.norm(Z, 2) ** 2 / (4 * n) + config.l2
    step = config.learning_rate / lipschitz
    penalty = np.ones(Z.shape[1])
    penalty[-1] = 0.0  # bias is not regularized
    w = np.zeros(Z.shape[1])
    v = w.copy()
    for t in range(config.iterations):
        p = 0.5 * (1.0 + np.tanh(0.5 * (Z @ v)))
        grad = Z.T @ (p - y) / n + config.l2 * penalty * v
        w_next = v - step * grad
        v = w_next + (t / (t + 3)) * (w_next - w)
        w = w_next
    return LogisticModel(w[:-1], float(w[-1]), mean, scale, config.threshold)


def precision_recall_f1(y_true, y_pred) -> tuple[float, float, float, bool]:
    """Positive-class P/R/F1; the flag is set when no positives were predicted."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    undefined = tp + fp == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, undefined


def temporal_split(examples: Sequence[ReturnExample], train_fraction: float = 0.7):
    order = sorted(range(len(examples)),
                   key=lambda i: (examples[i].cart.timestamp, examples[i].cart.user_id,
                                  examples[i].cart.product_id))
    cut = int(round(train_fraction * len(order)))
    return [examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]]


def random_split(examples: Sequence[ReturnExample], train_fraction: float = 0.7, seed: int = 0):
    perm = np.random.default_rng(seed).permutation(len(examples))
    cut = int(round(train_fraction * len(examples)))
    return [examples[i] for i in perm[:cut]], [examples[i] for i in perm[cut:]]


def split_examples(examples: Sequence[ReturnExample], config: LogisticConfig):
    if config.split == "temporal":
        return temporal_split(examples, config.train_fraction)
    if config.split == "random":
        return random_split(examples, config.train_fraction, config.seed)
    raise UsageError(f"unknown split {config.split!r}")


def return_predict_train_eval(
    examples: Sequence[ReturnExample],
    split=None,
    config: LogisticConfig | None = None,
    name: str = "",
):
    """Fit on the train part of ``split`` (default: per ``config.split``), report test P/R/F1.

    Returns (model, precision, recall, f1, report).
    """
    config = config or LogisticConfig()
    train, test = split if split is not None else split_examples(examples, config)
    if not train or not test:
        raise DataError("empty train or test split")
    Xtr = np.array([e.features for e in train])
    ytr = np.array([e.label for e in train])
    model = fit_logistic(Xtr, ytr, config)
    Xte = np.array([e.features for e in test])
    yte = np.array([e.label for e in test])
    p, r, f1, undefined = precision_recall_f1(yte, model.predict(Xte))
    report = EvalReport("return_prediction", name, [("precision", p), ("recall", r), ("f1", f1)],
                        counts={"train": len(train), "test": len(test),
                                "precision_undefined": int(undefined)})
    return model, p, r, f1, report
