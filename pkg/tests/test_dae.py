import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from prodembed.core import ConfigError, ProductRecord
from prodembed.dae import (
    DaeConfig,
    DaeModel,
    LayoutMismatchError,
    OneHotLayout,
    corrupt,
    dae_gradients,
    dae_loss,
    dae_train,
    load_dae,
    one_hot_encode,
    save_dae,
)


def _toy_model(seed=0, vocab=8, dim=3):
    cfg = DaeConfig(dimension=dim, hidden=(6, 4), seed=seed)
    return DaeModel.initialize(vocab, cfg)


def test_widths_shrink_for_small_vocab_and_reject_narrow_input():
    assert DaeConfig(dimension=100).widths(1000) == [1000, 512, 256, 100, 256, 512, 1000]
    assert DaeConfig(dimension=100).widths(256) == [256, 256, 128, 100, 128, 256, 256]
    assert DaeConfig(dimension=100).widths(108)[1:3] == [108, 100]
    with pytest.raises(ConfigError):
        DaeConfig(dimension=10).widths(9)


@pytest.mark.parametrize("seed", range(3))
def test_backprop_matches_finite_differences(seed):
    model = _toy_model(seed)
    rng = np.random.default_rng(seed)
    x = (rng.random((5, 8)) < 0.4).astype(float)
    xc = corrupt(x, 0.5, seed)
    loss, gw, gb = dae_gradients(model, x, xc)
    assert loss == pytest.approx(dae_loss(model, x, xc))
    for k in range(len(model.weights)):
        def f_w(w, k=k):
            old = model.weights[k]
            model.weights[k] = w
            try:
                return dae_loss(model, x, xc)
            finally:
                model.weights[k] = old

        def f_b(b, k=k):
            old = model.biases[k]
            model.biases[k] = b
            try:
                return dae_loss(model, x, xc)
            finally:
                model.biases[k] = old

        assert rel_err(gw[k], central_diff(f_w, model.weights[k])) < 1e-4
        assert rel_err(gb[k], central_diff(f_b, model.biases[k])) < 1e-4


def test_loss_matches_definition():
    model = _toy_model()
    x = np.eye(8)[:4]
    xc = corrupt(x, 0.3, 1)
    r = model.reconstruct(xc) - x
    assert dae_loss(model, x, xc) == pytest.approx(np.mean(np.sum(r * r, axis=1)) / 2)


@given(st.floats(0, 2), st.integers(0, 100))
def test_corruption_is_additive_uniform(scale, seed):
    x = np.zeros((3, 4))
    y = corrupt(x, scale, seed)
    assert np.all(y >= 0) and np.all(y <= scale)
    assert np.array_equal(y, corrupt(x, scale, seed))


def test_one_hot_and_layout_mismatch():
    recs = [ProductRecord("a", {"brand": "x", "neck": "v"}), ProductRecord("b", {"brand": "y"})]
    layout = OneHotLayout.from_catalog(recs)
    assert layout.tokens == ["brand=x", "brand=y", "neck=v"]
    assert one_hot_encode(recs[0], layout).tolist() == [1, 0, 1]
    with pytest.raises(LayoutMismatchError):
        one_hot_encode(ProductRecord("c", {"brand": "z"}), layout)


def _catalog():
    recs = []
    for i in range(40):
        g = i % 2
        recs.append(ProductRecord(f"p{i}", {
            "brand": f"b{g}{i % 3}", "basecolor": f"c{g}", "fabric": f"f{g}{i % 2}",
            "neck": f"n{g}", "pattern": f"t{i % 4}",
        }))
    return recs


def test_training_reduces_loss_and_round_trips(tmp_path):
    cat = _catalog()
    cfg = DaeConfig(dimension=4, hidden=(12, 8), epochs=60, batch_size=8, learning_rate=0.1, seed=2)
    model, table = dae_train(cat, config=cfg)
    # per-batch corruption makes the curve noisy; compare averages
    assert np.mean(model.loss_trace[-10:]) < 0.75 * model.loss_trace[0]
    assert table.dimension == 4 and len(table) == 40
    _, again = dae_train(cat, config=cfg)
    assert again == table
    save_dae(model, OneHotLayout.from_catalog(cat), tmp_path / "dae")
    loaded, layout = load_dae(tmp_path / "dae")
    x = one_hot_encode(cat[0], layout)[None, :]
    assert np.allclose(loaded.encode(x), model.encode(x), atol=1e-6)
