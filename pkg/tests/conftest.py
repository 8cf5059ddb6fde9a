import functools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rbal.geometry import build_p1_backend, build_product_backend

settings.register_profile("rbal", deadline=None, max_examples=25, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "rbal"))


@functools.lru_cache(maxsize=None)
def p1(k, n_theta=None, n_phi=None):
    return build_p1_backend(k, n_theta, n_phi)


@functools.lru_cache(maxsize=None)
def product(k, n_theta=16, n_phi=32):
    f = build_p1_backend(k, n_theta, n_phi)
    return build_product_backend(f, f)


def random_positive(rng, dim, spread=1.0):
    X = spread * (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)))
    return X @ X.conj().T / dim + 0.1 * np.eye(dim)


def random_traceless(rng, dim):
    X = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    A = 0.5 * (X + X.conj().T)
    return A - np.trace(A).real / dim * np.eye(dim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
