import numpy as np
import pytest

from msboost import BasisSpec, MultiStudyDataset, Study, standardize


def random_dataset(rng, k=3, n=25, p=4, v=1, n_test=15):
    """Standardized multi-study dataset with Gaussian predictors and outcomes."""
    train = [
        standardize(Study(id=f"s{i}", x=rng.normal(size=(n, p)), y=rng.normal(size=n)))
        for i in range(k)
    ]
    test = [
        standardize(Study(id=f"t{i}", x=rng.normal(size=(n_test, p)), y=rng.normal(size=n_test)))
        for i in range(v)
    ]
    return MultiStudyDataset(training=train, test=test)


def unit_norm_design(rng, n, p):
    """Zero-mean, unit-l2-norm columns, the scale every learner assumes."""
    x = rng.normal(size=(n, p))
    x = x - x.mean(axis=0)
    return x / np.linalg.norm(x, axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
