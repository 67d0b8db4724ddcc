import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prodembed.core import EmbeddingTable, ProductRecord
from prodembed.ingest import Event

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b):
    """Norm-wise relative error |a - b| / max(|a|, |b|) of one parameter block.

    Elementwise ratios blow up on entries near 1e-7, where central
    differences are dominated by round-off.
    """
    a, b = np.ravel(np.asarray(a, float)), np.ravel(np.asarray(b, float))
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar f at x (float64 array)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


@pytest.fixture
def toy_catalog():
    return [
        ProductRecord("p1", {"brand": "nike", "basecolor": "black", "priceband": "0-500"}),
        ProductRecord("p2", {"brand": "nike", "basecolor": "red", "priceband": "0-500"}),
        ProductRecord("p3", {"brand": "puma", "basecolor": "black", "priceband": "500-1000"}),
        ProductRecord("p4", {"brand": "puma", "basecolor": "red"}),
    ]


@pytest.fixture
def toy_table():
    return EmbeddingTable.from_dict({
        "a": [1.0, 0.0], "b": [0.9, 0.1], "c": [0.0, 1.0], "d": [-1.0, 0.0],
    })


def make_events(rows):
    """rows: (user, product, type, session, ts)"""
    return [Event(*r) for r in rows]


@pytest.fixture(scope="session")
def default_world():
    from prodembed.synth import gen_world
    return gen_world()


TINY_INI = """
[pipeline]
seed = 5

[world]
n_products = 160
n_users = 300
n_styles = 2
brands_per_style = 6
clicks_per_user = 30
image_dim = 8

[sgns]
dimension = 8
epochs = 2

[deepwalk_sgns]
dimension = 8
epochs = 1

[deepwalk]
top_k = 5
walks_per_node = 2
walk_length = 8
nmf_iter = 30

[bpr]
dimension = 8
epochs = 3

[dae]
dimension = 8
hidden = 32, 16
epochs = 3

[logistic]
iterations = 200

[eval]
sample_size = 50
ks = 1, 5, 10
coherence_threshold = 0.0
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path
