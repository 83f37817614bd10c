"""Shared fixtures: a quickly trained desk-scale model on a crude dataset."""

import numpy as np
import pytest

from riskcam import model as M


def blob_dataset(spec, n_per_class=12, seed=0):
    """Three trivially separable classes: top-half, left-half, uniform."""
    rng = np.random.default_rng(seed)
    items = []
    s = spec.input_size
    for label in range(spec.classes):
        for _ in range(n_per_class):
            img = rng.random((s, s)).astype(np.float32) * 0.1
            if label == 0:
                img[: s // 2] += 0.8
            elif label == 1:
                img[:, : s // 2] += 0.8
            else:
                img += 0.4
            items.append((np.clip(img, 0, 1), label))
    return items


@pytest.fixture(scope="session")
def trained32():
    """Default model at 32x32 trained on the blob classes (acc >= 0.9)."""
    model = M.build_default_model(classes=3, input_size=32, seed=1)
    items = blob_dataset(model.spec, n_per_class=12, seed=0)
    store, _ = M.train_toy(model, items, epochs=8, lr=0.02, seed=3)
    trained = M.Model(model.spec, store)
    assert M.evaluate_accuracy(trained, items) >= 0.9
    return trained
