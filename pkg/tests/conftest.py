import numpy as np
import pytest

from adapterfuse import AdapterDelta, AdapterLibrary


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_library(n_tasks=3, n_layers=2, d_in=8, d_out=6, rank=2, seed=0, scaling=1.0):
    """Small dense-ish random library for io/merge/cli tests."""
    rng = np.random.default_rng(seed)
    tasks = tuple(str(i) for i in range(n_tasks))
    layers = tuple(f"{j:02d}" for j in range(n_layers))
    deltas = {}
    for t in tasks:
        for l in layers:
            deltas[(t, l)] = AdapterDelta(
                layer_id=l,
                a=rng.standard_normal((d_in, rank)),
                b=rng.standard_normal((d_out, rank)),
                scaling_s=scaling,
            )
    return AdapterLibrary(tasks=tasks, layers=layers, deltas=deltas)


def blob_points(n_per=40, dim=4, spread=0.05, centers=((0.0, 5.0), (5.0, 0.0)), seed=7):
    """Two well-separated Gaussian blobs; returns (vectors, true_labels)."""
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for lab, c in enumerate(centers):
        mu = np.zeros(dim)
        mu[: len(c)] = c
        pts.append(mu + spread * rng.standard_normal((n_per, dim)))
        labels += [lab] * n_per
    return np.vstack(pts).astype(np.float32), np.array(labels)
