import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for `oracles`

from vfscan.engine import LayerSpec, Network
from vfscan import model_io

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data")
DESK_MODEL = os.path.join(DATA_DIR, "desk_net.vglm")
DESK_BATCH = os.path.join(DATA_DIR, "desk_batch.vglb")


def three_class_toy(inputs, weights, m_pos, m_neg):
    """1x1-conv neuron feeding a 3-class head with known flip thresholds.

    The golden class is 0; an additive delta at the neuron output flips
    to class 1 iff delta > m_pos and to class 2 iff delta < -m_neg.
    """
    x = np.asarray(inputs, dtype=np.float32).reshape(-1)
    w = np.asarray(weights, dtype=np.float32).reshape(-1)
    n = x.size
    s = float(np.dot(x.astype(np.float64), w.astype(np.float64)))
    # asymmetric head so the summed loss gradient at the neuron is nonzero
    head_w = np.array([[0.0], [1.0], [-2.0]], dtype=np.float32)
    head_b = np.array([0.0, -(s + m_pos), 2 * s - 2 * m_neg], dtype=np.float32)
    net = Network([
        LayerSpec("conv2d", inputs=(-1,), weight=w.reshape(1, n, 1, 1),
                  kernel=1, stride=1, padding=0),
        LayerSpec("flatten"),
        LayerSpec("linear", weight=head_w, bias=head_b),
    ], n_classes=3, input_shape=(n, 1, 1))
    image = x.reshape(1, n, 1, 1)
    return net, image


def random_small_net(rng, n_classes=4, channels=(3, 5), size=6, maxpool=True):
    """A little conv net with random weights for oracle comparisons."""
    c1, c2 = channels
    layers = [
        LayerSpec("conv2d", inputs=(-1,),
                  weight=rng.normal(0, 0.4, (c1, 3, 3, 3)).astype(np.float32),
                  bias=rng.normal(0, 0.1, c1).astype(np.float32),
                  kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
    ]
    if maxpool:
        layers.append(LayerSpec("maxpool", kernel=2, stride=2))
    layers += [
        LayerSpec("conv2d",
                  weight=rng.normal(0, 0.4, (c2, c1, 3, 3)).astype(np.float32),
                  bias=rng.normal(0, 0.1, c2).astype(np.float32),
                  kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("globalavgpool"),
        LayerSpec("flatten"),
        LayerSpec("linear",
                  weight=rng.normal(0, 0.6, (n_classes, c2)).astype(np.float32),
                  bias=rng.normal(0, 0.1, n_classes).astype(np.float32)),
    ]
    return Network(layers, n_classes, (3, size, size))


@pytest.fixture(scope="session")
def desk_net():
    if not os.path.exists(DESK_MODEL):
        pytest.skip("desk net artifact not built (scripts/make_desk_net.py)")
    return model_io.load_model(DESK_MODEL)


@pytest.fixture(scope="session")
def desk_batch(desk_net):
    images, labels = model_io.load_batch(DESK_BATCH, n_classes=desk_net.n_classes)
    return images, labels
