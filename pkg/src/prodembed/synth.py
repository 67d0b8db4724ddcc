"""Synthetic catalog + clickstream with planted style structure.

Each product belongs to a latent style and has a latent "look" vector built
from its style centre, its brand offset and individual noise. Brand and
priceband follow the style closely, colour loosely; each brand has a house
fabric, neck and pattern (drawn from a small palette of its style) that
most of its products use. Users prefer one or two styles; a session picks an anchor product
and clicks products whose look is close to it (weighted by a power-law
popularity), with a fraction of pure popularity-driven noise clicks. Some
clicked products are bagged and some bags purchased. Image vectors are a
noisy linear projection of the look vector. Purchases carry return labels
from a logistic model over user propensity (partly set by the user's main
style), product return score and price.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ConfigError, EmbeddingTable, ProductRecord, save_table
from .ingest import Event

log = logging.getLogger(__name__)

COLORS = ("black", "white", "navy", "grey", "red", "blue", "green", "yellow",
          "maroon", "olive", "pink", "purple", "orange", "teal", "beige", "brown")
FABRICS = ("cotton", "polyester", "blended", "linen", "viscose", "modal", "nylon", "wool")
PRICEBANDS = ("0-500", "500-1000", "1000-1500", "1500-2000", "2000-2500", "2500-3000", "3000+")
NECKS = ("round neck", "polo collar", "v-neck", "henley", "mandarin collar", "hooded")
PATTERNS = ("solid", "printed", "striped", "colorblocked", "checked", "graphic", "melange")


@dataclass
class WorldConfig:
    n_products: int = 2000
    n_users: int = 5000
    n_styles: int = 4
    brands_per_style: int = 16
    clicks_per_user: float = 48.0
    bags_per_user: float = 6.0
    purchases_per_user: float = 4.5
    clicks_per_session: float = 9.3
    popularity_exponent: float = 1.5
    noise_click_rate: float = 0.1
    look_dim: int = 8
    style_separation: float = 4.0
    brand_separation: float = 1.6
    look_noise: float = 0.6
    session_bandwidth: float = 1.0
    session_popularity_power: float = 0.5
    brand_priceband_fidelity: float = 0.8
    style_color_fidelity: float = 0.3
    brand_attr_fidelity: float = 0.9
    palette_size: int = 3
    secondary_style_prob: float = 0.05
    image_dim: int = 100
    image_noise: float = 0.5
    return_rate: float = 0.3
    user_return_sd: float = 0.7
    style_return_sd: float = 1.0
    product_return_sd: float = 2.0
    price_return_effect: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "n_products": self.n_products, "n_users": self.n_users, "n_styles": self.n_styles,
            "brands_per_style": self.brands_per_style, "look_dim": self.look_dim,
            "image_dim": self.image_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        rates = {"clicks_per_user": self.clicks_per_user, "bags_per_user": self.bags_per_user,
                 "purchases_per_user": self.purchases_per_user,
                 "clicks_per_session": self.clicks_per_session}
        for name, value in rates.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.purchases_per_user > self.bags_per_user:
            raise ConfigError("purchases_per_user cannot exceed bags_per_user")
        if self.bags_per_user > self.clicks_per_user:
            raise ConfigError("bags_per_user cannot exceed clicks_per_user")
        if self.clicks_per_session > self.clicks_per_user:
            raise ConfigError("clicks_per_session cannot exceed clicks_per_user")
        if self.n_products < self.n_styles:
            raise ConfigError("need at least one product per style")
        if not 0 <= self.noise_click_rate < 1 or not 0 < self.return_rate < 1:
            raise ConfigError("noise_click_rate must be in [0, 1) and return_rate in (0, 1)")


@dataclass
class GroundTruth:
    style: dict[str, int]
    brand_effect: dict[str, float]
    product_return_score: dict[str, float]
    user_propensity: dict[str, float]
    user_styles: dict[str, list[int]]
    returns: list[dict] = field(default_factory=list)

    def records(self):
        for pid in sorted(self.style):
            yield {"kind": "product", "product_id": pid, "style": self.style[pid],
                   "return_score": round(self.product_return_score[pid], 6)}
        for uid in sorted(self.user_propensity):
            yield {"kind": "user", "user_id": uid, "styles": self.user_styles[uid],
                   "return_propensity": round(self.user_propensity[uid], 6)}
        yield from self.returns

    @classmethod
    def from_records(cls, records) -> "GroundTruth":
        gt = cls({}, {}, {}, {}, {})
        for r in records:
            kind = r.get("kind")
            if kind == "product":
                gt.style[r["product_id"]] = int(r["style"])
                gt.product_return_score[r["product_id"]] = float(r["return_score"])
            elif kind == "user":
                gt.user_propensity[r["user_id"]] = float(r["return_propensity"])
                gt.user_styles[r["user_id"]] = list(r["styles"])
            elif kind == "return":
                gt.returns.append(r)
        return gt

    def return_labels(self) -> dict[tuple[str, str, str], int]:
        return {(r["user_id"], r["product_id"], r["session_id"]): int(r["returned"])
                for r in self.returns}


@dataclass
class World:
    config: WorldConfig
    catalog: list[ProductRecord]
    events: list[Event]
    ground_truth: GroundTruth
    images: EmbeddingTable
    price: dict[str, float]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrate_intercept(logits: np.ndarray, target: float, tol: float = 1e-10) -> float:
    """Offset b such that mean(sigmoid(logits + b)) == target (bisection)."""
    lo, hi = -50.0, 50.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.mean(_sigmoid(logits + mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def draw_return_labels(logits: np.ndarray, target_rate: float, rng) -> np.ndarray:
    b = calibrate_intercept(logits, target_rate)
    return (rng.random(len(logits)) < _sigmoid(logits + b)).astype(np.int64)


def gen_world(config: WorldConfig | None = None) -> World:
    config = config or WorldConfig()
    config.validate()
    if config.n_styles == 1:
        warnings.warn("n_styles=1: inter-cluster similarity checks are vacuous", stacklevel=2)
    rng = np.random.default_rng(config.seed)
    P, S = config.n_products, config.n_styles
    pids = [f"p{i:05d}" for i in range(P)]

    # products
    style = np.arange(P) % S
    rng.shuffle(style)
    n_brands = S * config.brands_per_style
    brand_style = np.repeat(np.arange(S), config.brands_per_style)
    brand_names = [f"brand{b:02d}" for b in range(n_brands)]
    brand = np.array([rng.choice(np.flatnonzero(brand_style == s)) for s in style])
    style_centre = rng.normal(size=(S, config.look_dim))
    style_centre *= config.style_separation / np.linalg.norm(style_centre, axis=1, keepdims=True)
    brand_offset = rng.normal(size=(n_brands, config.look_dim))
    brand_offset *= config.brand_separation / np.linalg.norm(brand_offset, axis=1, keepdims=True)
    look = style_centre[style] + brand_offset[brand] + rng.normal(
        scale=config.look_noise, size=(P, config.look_dim))

    popularity = np.empty(P)
    popularity[rng.permutation(P)] = np.arange(1, P + 1, dtype=float) ** -config.popularity_exponent

    # side information
    style_price = rng.permutation(np.linspace(0, len(PRICEBANDS) - 1, S).round().astype(int))
    brand_price = np.clip(style_price[brand_style] + rng.integers(-1, 2, n_brands), 0, len(PRICEBANDS) - 1)
    style_colors = [rng.choice(len(COLORS), 3, replace=False) for _ in range(S)]
    # house attributes come from a per-style palette
    house = {}
    for key, values in (("fabric", FABRICS), ("neck", NECKS), ("pattern", PATTERNS)):
        palette = [rng.choice(len(values), min(config.palette_size, len(values)), replace=False) for _ in range(S)]
        house[key] = np.array([rng.choice(palette[s]) for s in brand_style])
    catalog, price, pband = [], {}, np.empty(P, dtype=int)
    for i in range(P):
        b = brand[i]
        pb = brand_price[b] if rng.random() < config.brand_priceband_fidelity else rng.integers(len(PRICEBANDS))
        pband[i] = pb
        if rng.random() < config.style_color_fidelity:
            color = COLORS[rng.choice(style_colors[style[i]])]
        else:
            color = COLORS[rng.integers(len(COLORS))]
        attrs = {}
        for key, values in (("fabric", FABRICS), ("neck", NECKS), ("pattern", PATTERNS)):
            k = house[key][b] if rng.random() < config.brand_attr_fidelity else rng.integers(len(values))
            attrs[key] = values[k]
        si = {
            "brand": brand_names[b],
            "basecolor": color,
            "fabric": attrs["fabric"],
            "priceband": PRICEBANDS[pb],
            "neck": attrs["neck"],
            "pattern": attrs["pattern"],
        }
        catalog.append(ProductRecord(pids[i], si))
        price[pids[i]] = float(250 + 500 * pb + rng.integers(0, 500))

    # image vectors: noisy projection of the look
    proj = rng.normal(size=(config.look_dim, config.image_dim)) / np.sqrt(config.look_dim)
    img = look @ proj + rng.normal(scale=config.image_noise, size=(P, config.image_dim))
    images = EmbeddingTable(pids, img, {"method": "IE", "source": "synthetic"})

    # return model
    brand_effect = rng.normal(size=n_brands)
    look_dir = rng.normal(size=config.look_dim)
    look_dir /= np.linalg.norm(look_dir)
    raw = brand_effect[brand] + 0.5 * (look - look.mean(0)) @ look_dir + rng.normal(scale=0.3, size=P)
    product_score = config.product_return_sd * (raw - raw.mean()) / raw.std()

    # users
    uids = [f"u{i:05d}" for i in range(config.n_users)]
    primary = rng.integers(0, S, config.n_users)
    user_styles = []
    for u in range(config.n_users):
        styles = [int(primary[u])]
        if S > 1 and rng.random() < config.secondary_style_prob:
            styles.append(int(rng.choice([s for s in range(S) if s != primary[u]])))
        user_styles.append(styles)
    # users of some styles return more, whatever they buy
    style_effect = rng.normal(scale=config.style_return_sd, size=S)
    propensity = style_effect[primary] + rng.normal(scale=config.user_return_sd, size=config.n_users)

    members = [np.flatnonzero(style == s) for s in range(S)]
    pop_all = popularity / popularity.sum()
    sessions_per_user = config.clicks_per_user / config.clicks_per_session
    p_bag = config.bags_per_user / config.clicks_per_user
    p_purchase = config.purchases_per_user / config.bags_per_user
    horizon = 90 * 86400

    events: list[Event] = []
    carts = []  # (user index, product index, session id, ts)
    sid = 0
    for u in range(config.n_users):
        n_sessions = 1 + rng.poisson(max(sessions_per_user - 1, 0))
        starts = np.sort(rng.integers(0, horizon, n_sessions))
        for start in starts:
            s_style = user_styles[u][0] if len(user_styles[u]) == 1 or rng.random() < 0.75 \
                else user_styles[u][1]
            cand = members[s_style]
            w_pop = popularity[cand]
            anchor = cand[rng.choice(len(cand), p=w_pop / w_pop.sum())]
            dist2 = np.sum((look[cand] - look[anchor]) ** 2, axis=1)
            w = w_pop ** config.session_popularity_power * np.exp(
                -dist2 / (2 * config.session_bandwidth ** 2))
            w /= w.sum()
            n_clicks = 1 + rng.poisson(config.clicks_per_session - 1)
            clicks = []
            for _ in range(n_clicks):
                for _attempt in range(10):  # no immediate re-click of the same product
                    if rng.random() < config.noise_click_rate:
                        nxt = rng.choice(P, p=pop_all)
                    else:
                        nxt = cand[rng.choice(len(cand), p=w)]
                    if not clicks or nxt != clicks[-1]:
                        break
                else:
                    continue
                clicks.append(int(nxt))
            session = f"s{sid:07d}"
            sid += 1
            ts = int(start)
            bagged = []
            for p in clicks:
                events.append(Event(uids[u], pids[p], "click", session, ts))
                ts += int(rng.integers(20, 120))
                if p not in bagged and rng.random() < p_bag:
                    bagged.append(p)
                    events.append(Event(uids[u], pids[p], "bag", session, ts))
                    ts += int(rng.integers(5, 30))
            for p in bagged:
                if rng.random() < p_purchase:
                    events.append(Event(uids[u], pids[p], "purchase", session, ts))
                    carts.append((u, p, session, ts))
                    ts += 1

    # return labels
    if carts:
        cu = np.array([c[0] for c in carts])
        cp = np.array([c[1] for c in carts])
        logits = propensity[cu] + product_score[cp] + config.price_return_effect * (
            pband[cp] - pband.mean())
        labels = draw_return_labels(logits, config.return_rate, rng)
    else:
        labels = np.empty(0, dtype=np.int64)
    returns = [
        {"kind": "return", "user_id": uids[u], "product_id": pids[p], "session_id": s,
         "ts": t, "returned": int(y)}
        for (u, p, s, t), y in zip(carts, labels)
    ]

    order = sorted(range(len(events)), key=lambda k: (events[k].timestamp, k))
    events = [events[k] for k in order]
    truth = GroundTruth(
        style={pids[i]: int(style[i]) for i in range(P)},
        brand_effect={brand_names[b]: float(brand_effect[b]) for b in range(n_brands)},
        product_return_score={pids[i]: float(product_score[i]) for i in range(P)},
        user_propensity={uids[u]: float(propensity[u]) for u in range(config.n_users)},
        user_styles={uids[u]: user_styles[u] for u in range(config.n_users)},
        returns=returns,
    )
    log.info("world: %d products, %d users, %d events, %d carts",
             P, config.n_users, len(events), len(carts))
    return World(config, catalog, events, truth, images, price)


def catalog_lines(world: World):
    for rec in world.catalog:
        row = {"product_id": rec.product_id, **{k: v for k, v in rec.si.items()}}
        row["price"] = world.price[rec.product_id]
        yield json.dumps(row, sort_keys=False)


def event_lines(world: World):
    for e in world.events:
        yield json.dumps({"user_id": e.user_id, "product_id": e.product_id,
                          "event_type": e.event_type, "session_id": e.session_id,
                          "ts": e.timestamp})


def write_world(world: World, directory) -> dict[str, str]:
    """Write catalog, events, ground truth, image vectors and config; return paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "catalog": os.path.join(directory, "catalog.jsonl"),
        "events": os.path.join(directory, "events.jsonl"),
        "ground_truth": os.path.join(directory, "ground_truth.jsonl"),
        "images": os.path.join(directory, "images.emb"),
        "world_config": os.path.join(directory, "world.json"),
    }
    with open(paths["catalog"], "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in catalog_lines(world))
    with open(paths["events"], "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in event_lines(world))
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        fh.writelines(json.dumps(r) + "\n" for r in world.ground_truth.records())
    save_table(world.images, paths["images"])
    with open(paths["world_config"], "w", encoding="utf-8") as fh:
        json.dump(asdict(world.config), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def read_ground_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_records(json.loads(line) for line in fh if line.strip())


def click_share_of_top(events, fraction: float = 0.2, n_products: int | None = None) -> float:
    """Share of clicks received by the most-clicked ``fraction`` of products."""
    counts: dict[str, int] = {}
    for e in events:
        if e.event_type == "click":
            counts[e.product_id] = counts.get(e.product_id, 0) + 1
    n = n_products or len(counts)
    values = sorted(counts.values(), reverse=True) + [0] * max(0, n - len(counts))
    top = int(round(fraction * n))
    return sum(values[:top]) / max(1, sum(values))
