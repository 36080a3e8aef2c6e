import numpy as np
import pytest

from iahvae.model import build_model


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    err = np.abs(analytic - numeric)
    bound = rtol * np.abs(numeric) + atol
    assert np.all(err <= bound), f"max err {err.max():.3e}, worst ratio {(err / bound).max():.3f}"


@pytest.fixture(scope="session")
def random_model_8():
    """Small random-weight model (8x8, 2 layers per scale, live heads)."""
    return build_model(resolution=8, layers_per_scale=2, zero_init=False, seed=3)


@pytest.fixture(scope="session")
def random_model_16():
    """Random-weight L=10 model at 16x16 with live heads."""
    return build_model(resolution=16, layers_per_scale=2, zero_init=False, seed=1)
