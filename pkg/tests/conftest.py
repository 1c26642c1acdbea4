import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tie_free_logits(rng, num_classes, window, scale=2.0, gap=1e-6):
    """Random logits whose window-boundary probability gaps exceed ``gap``."""
    from prsl.numerics import softmax

    while True:
        z = rng.normal(scale=scale, size=num_classes)
        p = np.sort(softmax(z))[::-1]
        edges = []
        if window.j > 1:
            edges.append(p[window.j - 2] - p[window.j - 1])
        if window.k < num_classes:
            edges.append(p[window.k - 1] - p[window.k])
        if all(e > gap for e in edges):
            return z
