"""Synthetic 10-class image task for the desk-scale experiments.

Each class is a fixed low-frequency RGB prototype; samples are randomly
shifted, scaled and noised copies.  Deterministic given the seed.
"""

import numpy as np

N_CLASSES = 10
SHAPE = (3, 16, 16)


def make_prototypes(rng):
    base = rng.normal(0.0, 1.0, (N_CLASSES, 3, 4, 4))
    protos = np.kron(base, np.ones((1, 1, 4, 4)))          # 4x4 -> 16x16 blocks
    protos += rng.normal(0.0, 0.25, (N_CLASSES,) + SHAPE)  # mild texture
    protos -= protos.mean(axis=(1, 2, 3), keepdims=True)
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    return protos.astype(np.float32)


def sample(rng, protos, n, noise=1.0, max_shift=2):
    labels = rng.integers(0, N_CLASSES, n)
    images = np.empty((n,) + SHAPE, dtype=np.float32)
    for i, k in enumerate(labels):
        img = protos[k] * rng.uniform(0.75, 1.25)
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
        img = np.roll(img, (dy, dx), axis=(1, 2))
        img = img + rng.normal(0.0, noise, SHAPE)
        images[i] = img
    return images, labels.astype(np.uint16)


def make_split(seed=2024, n_train=4000, n_test=1000, noise=1.0):
    rng = np.random.default_rng(seed)
    protos = make_prototypes(rng)
    x_train, y_train = sample(rng, protos, n_train, noise)
    x_test, y_test = sample(rng, protos, n_test, noise)
    return (x_train, y_train), (x_test, y_test)
