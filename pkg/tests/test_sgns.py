import itertools
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from prodembed.core import ConfigError, DataError, DegenerateInputError, ProductRecord
from prodembed.sgns import (
    PairCorpus,
    SgnsConfig,
    UnigramSampler,
    alias_table,
    build_corpus,
    gen_pairs_prod2vec,
    gen_pairs_prodsi2vec,
    pair_gradient,
    pair_objective,
    sgns_step,
    sgns_train,
    train_sgns,
)

SI_POOL = ("brand", "basecolor", "fabric", "priceband", "neck", "pattern")


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_pair_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, k = rng.integers(2, 9), rng.integers(1, 5)
    v, u, un = rng.normal(size=d), rng.normal(size=d), rng.normal(size=(k, d))
    dv, du, dn = pair_gradient(v, u, un)
    assert rel_err(dv, central_diff(lambda z: pair_objective(z, u, un), v)) < 1e-4
    assert rel_err(du, central_diff(lambda z: pair_objective(v, z, un), u)) < 1e-4
    assert rel_err(dn, central_diff(lambda z: pair_objective(v, u, z), un)) < 1e-4


def test_sgns_step_is_one_ascent_step_on_the_pair_objective():
    rng = np.random.default_rng(3)
    w_in = rng.normal(size=(6, 5)).astype(np.float32)
    w_out = rng.normal(size=(6, 5)).astype(np.float32)
    c, x, negs, lr = 0, 1, [2, 3, 4], 0.05
    v, u, un = (w_in[c].astype(float), w_out[x].astype(float), w_out[negs].astype(float))
    dv, du, dn = pair_gradient(v, u, un)
    before = sgns_step(w_in, w_out, c, x, negs, lr)
    assert before == pytest.approx(pair_objective(v, u, un), rel=1e-5)
    assert np.allclose(w_in[c], v + lr * dv, atol=1e-6)
    assert np.allclose(w_out[x], u + lr * du, atol=1e-6)
    assert np.allclose(w_out[negs], un + lr * dn, atol=1e-6)
    assert pair_objective(w_in[c], w_out[x], w_out[negs]) > before


# -- pair combinatorics ------------------------------------------------------


def _oracle_prodsi(lst, si, window=None):
    out = Counter()
    for i, j in itertools.permutations(range(len(lst)), 2):
        if window is not None and abs(i - j) > window:
            continue
        pc, px = lst[i], lst[j]
        out[(pc, px)] += 1
        for s in si[pc] + si[px]:
            out[(pc, s)] += 1
        for a in si[pc]:
            for b in si[px]:
                out[(a, b)] += 1
    return out


def _catalog(counts):
    return {f"p{i}": [f"{SI_POOL[k]}=v{i}" for k in range(n)] for i, n in enumerate(counts)}


def test_pair_counts_exhaustive():
    t0 = time.perf_counter()
    for n in range(7):
        lst = [f"p{i}" for i in range(n)]
        pairs = list(gen_pairs_prod2vec([lst]))
        expected = n * (n - 1) if n >= 2 else 0
        assert len(pairs) == expected
        assert Counter(pairs) == Counter(itertools.permutations(lst, 2))
    for sc, sx in itertools.product(range(7), repeat=2):
        si = _catalog([sc, sx])
        got = list(gen_pairs_prodsi2vec([["p0", "p1"]], si))
        fwd = [p for p in got if p.centre == "p0" or p.centre.endswith("v0")]
        assert len(fwd) == 1 + sc + sx + sc * sx
        assert Counter(got) == _oracle_prodsi(["p0", "p1"], si)
    # every list up to length 6 with every per-product SI count profile up to length 3,
    # and a stratified sweep of profiles for longer lists
    for n in range(7):
        profiles = itertools.product(range(7), repeat=n) if n <= 3 else (
            [(s + i) % 7 for i in range(n)] for s in range(7))
        for prof in profiles:
            si = _catalog(prof)
            lst = [f"p{i}" for i in range(n)]
            got = list(gen_pairs_prodsi2vec([lst], si))
            want = sum((1 + prof[i]) * (1 + prof[j]) for i, j in itertools.permutations(range(n), 2))
            assert len(got) == want
            assert Counter(got) == _oracle_prodsi(lst, si)
    assert time.perf_counter() - t0 < 5


@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=6), max_size=5),
       st.dictionaries(st.sampled_from(["a", "b", "c", "d"]), st.integers(0, 6)),
       st.one_of(st.none(), st.integers(1, 3)))
def test_materialized_corpus_matches_generator(lists, si_counts, window):
    cat = {p: [f"{SI_POOL[k]}={p}{k}" for k in range(n)] for p, n in si_counts.items()}
    corpus = build_corpus(lists, cat, window)
    assert list(corpus) == list(gen_pairs_prodsi2vec(lists, cat, window))
    assert corpus.singletons == sum(len(l) < 2 for l in lists)
    oracle = Counter()
    for l in lists:
        oracle += _oracle_prodsi(l, {p: cat.get(p, []) for p in l}, window)
    assert Counter(corpus) == oracle


def test_repeated_products_and_records():
    recs = [ProductRecord("a", {"brand": "x"}), ProductRecord("b")]
    pairs = list(gen_pairs_prodsi2vec([["a", "a", "b"]], recs))
    assert Counter(pairs)[("a", "a")] == 2
    assert Counter(pairs)[("a", "brand=x")] == 6


def test_si_collision_rejected():
    with pytest.raises(DataError):
        build_corpus([["brand=x", "b"]], {"b": ["brand=x"]})


# -- negative sampling -------------------------------------------------------


@given(st.lists(st.integers(0, 50), min_size=1, max_size=12), st.floats(0.1, 1.0))
def test_unigram_probabilities(counts, exponent):
    if sum(counts) == 0:
        with pytest.raises(DegenerateInputError):
            UnigramSampler(counts, exponent)
        return
    p = UnigramSampler(counts, exponent).probabilities
    w = np.array([c ** exponent if c > 0 else 0.0 for c in counts])
    assert np.allclose(p, w / w.sum())
    assert np.all(p[np.array(counts) == 0] == 0)


def test_sampler_frequencies_and_alias_table():
    counts = np.array([1, 8, 0, 27, 64])
    s = UnigramSampler(counts, 0.75, seed=1)
    freq = np.bincount(s.draw(200_000), minlength=5) / 200_000
    assert np.allclose(freq, s.probabilities, atol=0.005)
    accept, alias = alias_table(s.probabilities)
    n = len(counts)
    implied = accept / n
    for i in range(n):
        implied[alias[i]] += (1 - accept[i]) / n
    assert np.allclose(implied, s.probabilities, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        SgnsConfig(exponent=0)
    with pytest.raises(ConfigError):
        SgnsConfig(negatives=0)


# -- training ----------------------------------------------------------------


def _two_clusters():
    lists = [["a1", "a2", "a3", "a4"]] * 30 + [["b1", "b2", "b3", "b4"]] * 30
    return build_corpus(lists)


def test_training_is_deterministic_and_improves():
    cfg = SgnsConfig(dimension=8, epochs=5, seed=7, learning_rate=0.05)
    m1 = train_sgns(_two_clusters(), cfg)
    m2 = train_sgns(_two_clusters(), cfg)
    assert np.array_equal(m1.input_vectors, m2.input_vectors)
    assert m1.loss_trace[-1] > m1.loss_trace[0]
    t = m1.table()
    unit = t.unit_vectors()
    same = unit[t.index["a1"]] @ unit[t.index["a2"]]
    other = unit[t.index["a1"]] @ unit[t.index["b1"]]
    assert same > other + 0.3


def test_sgns_train_on_pair_iterable():
    t = sgns_train([("x", "y"), ("y", "x")], SgnsConfig(dimension=4, epochs=1))
    assert set(t.tokens) == {"x", "y"} and t.dimension == 4


def test_empty_stream():
    with pytest.raises(DataError):
        train_sgns(PairCorpus.from_pairs([]), SgnsConfig(dimension=2))
