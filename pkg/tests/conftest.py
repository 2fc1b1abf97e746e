import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from analogcim.tensor_net import LayerSpec, NetworkSpec  # noqa: E402
from analogcim.train import pattern_images, toy_cnn, toy_mlp  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp():
    return toy_mlp(in_dim=8, hidden=12, classes=3, seed=0)


@pytest.fixture
def cnn():
    return toy_cnn(size=8, classes=4, width=4, seed=0)


@pytest.fixture(scope="session")
def patterns():
    return pattern_images(400, size=8, noise=0.3, seed=5)


def dense_net(w, bias=None, name="fc"):
    w = np.asarray(w, dtype=np.float64)
    layer = LayerSpec("dense", name, in_channels=w.shape[1], out_channels=w.shape[0], weights=w,
                      bias=np.zeros(w.shape[0]) if bias is None else bias)
    return NetworkSpec([layer], input_shape=(w.shape[1],), class_count=w.shape[0])


def depthwise_layer(c, k=3, m=1, seed=0, name="dw"):
    w = np.random.default_rng(seed).standard_normal((c * m, k * k))
    return LayerSpec("depthwise_conv2d", name, kernel=k, padding=k // 2, in_channels=c,
                     out_channels=c * m, weights=w)
