import numpy as np
import pytest

from smsubu.model import LogRegModel
from smsubu.runner.data import synthetic_logreg


def newton_mode(model, iters=60):
    """Exact posterior mode of a smooth convex model via Newton steps (test oracle)."""
    x = np.zeros(model.dim)
    eye = np.eye(model.dim)
    for _ in range(iters):
        H = np.array([model.hessian_vector_product(x, e) for e in eye])
        x = x - np.linalg.solve(H, model.gradient(x))
    return x


@pytest.fixture
def small_logreg():
    ds, _ = synthetic_logreg(60, n_features=2, n_classes=3, feature_scale=1.0, rng=3)
    return LogRegModel(ds.features, ds.labels, prior_variance=1.0)
