import time

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from prodembed.core import ConfigError, DegenerateInputError, UsageError
from prodembed.mf import (
    BprConfig,
    InteractionMatrix,
    NmfConfig,
    bpr_score,
    bpr_train,
    nmf_factorize,
    sample_triples,
    triple_gradient,
    triple_objective,
)


@pytest.mark.parametrize("seed", range(5))
def test_triple_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    gu, gi, gj = rng.normal(size=(3, d))
    bi, bj = rng.normal(size=2)
    reg = 0.05
    dgu, dgi, dgj, dbi, dbj = triple_gradient(gu, gi, gj, bi, bj, reg)
    assert rel_err(dgu, central_diff(lambda z: triple_objective(z, gi, gj, bi, bj, reg), gu)) < 1e-4
    assert rel_err(dgi, central_diff(lambda z: triple_objective(gu, z, gj, bi, bj, reg), gi)) < 1e-4
    assert rel_err(dgj, central_diff(lambda z: triple_objective(gu, gi, z, bi, bj, reg), gj)) < 1e-4
    num = central_diff(lambda z: triple_objective(gu, gi, gj, z[0], z[1], reg), [bi, bj])
    assert rel_err([dbi, dbj], num) < 1e-4


def test_alpha_and_user_bias_cancel():
    rng = np.random.default_rng(0)
    gu, gi, gj = rng.normal(size=(3, 4))
    a = triple_objective(gu, gi, gj, 0.1, 0.2, 0.01)
    assert a == pytest.approx(triple_objective(gu, gi, gj, 0.1, 0.2, 0.01, alpha=3.0, bu=-2.0))


def _block_matrix():
    # two user groups, each interacting with one half of the catalog
    triples = [(f"u{u}", f"p{p}", 1.0) for u in range(20) for p in range(10)
               if (u < 10) == (p < 5) and (u + p) % 3 != 0]
    return InteractionMatrix.from_triples(triples)


def test_bpr_learns_block_structure_and_is_deterministic():
    m = _block_matrix()
    cfg = BprConfig(dimension=4, epochs=60, learning_rate=0.1, reg=0.001, seed=3)
    model = bpr_train(m, cfg)
    again = bpr_train(m, cfg)
    assert np.array_equal(model.item_factors, again.item_factors)
    assert model.loss_trace[0][0] == 0 and len(model.loss_trace) == 61
    assert model.loss_trace[-1][1] > model.loss_trace[0][1]
    # held-out within-block product beats an out-of-block product
    assert bpr_score(model, "u0", "p3") > bpr_score(model, "u0", "p7")


def test_sample_triples_are_valid():
    m = _block_matrix()
    dense = m.matrix.toarray()
    for u, i, j in sample_triples(m, 500, seed=1):
        assert dense[u, i] > 0 and dense[u, j] == 0


def test_bpr_config_and_degenerate_input():
    with pytest.raises(ConfigError):
        BprConfig(learning_rate=0)
    empty = InteractionMatrix(sp.csr_matrix((2, 2)), ["a", "b"], ["x", "y"])
    with pytest.raises(DegenerateInputError):
        bpr_train(empty)
    with pytest.raises(UsageError):
        InteractionMatrix.from_triples([("a", "x", -1.0)])


# -- NMF ---------------------------------------------------------------------


def test_nmf_nonnegative_monotone_and_rank_one_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.random((30, 20)) * (rng.random((30, 20)) < 0.4)
    seen = []

    def check(W, H, err):
        assert W.min() >= 0 and H.min() >= 0
        seen.append(err)

    res = nmf_factorize(sp.csr_matrix(X), 4, NmfConfig(max_iter=300, tol=0), callback=check)
    assert len(seen) == 300
    errs = np.array(res.errors)
    assert np.all(np.diff(errs) <= 1e-12)
    assert errs[-1] == pytest.approx(np.linalg.norm(X - res.row_factors @ res.col_factors))

    u, v = rng.random(12) + 0.1, rng.random(9) + 0.1
    R = np.outer(u, v)
    r1 = nmf_factorize(R, 1, NmfConfig(max_iter=2000, tol=0))
    assert np.linalg.norm(R - r1.row_factors @ r1.col_factors) < 1e-6
    assert time.perf_counter() - t0 < 5


@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 3), st.integers(0, 1000))
def test_nmf_error_never_increases(n, m, rank, seed):
    X = np.random.default_rng(seed).random((n, m))
    errs = np.array(nmf_factorize(X, rank, NmfConfig(max_iter=50, tol=0, seed=seed)).errors)
    assert np.all(np.diff(errs) <= 1e-12 * max(1.0, errs[0]))


def test_nmf_trace_form_matches_exact():
    from prodembed.mf import _frobenius
    rng = np.random.default_rng(1)
    X = sp.random(40, 30, density=0.2, random_state=1, format="csr")
    W, H = rng.random((40, 3)), rng.random((3, 30))
    sq = float(np.sum(X.data ** 2))
    assert _frobenius(X, W, H, sq, False) == pytest.approx(_frobenius(X, W, H, sq, True), rel=1e-9)


def test_nmf_rejects_bad_input():
    with pytest.raises(UsageError):
        nmf_factorize(np.array([[1.0, -1.0]]), 1)
    with pytest.raises(DegenerateInputError):
        nmf_factorize(np.zeros((2, 2)), 1)
    with pytest.raises(UsageError):
        nmf_factorize(np.ones((2, 2)), 0)
