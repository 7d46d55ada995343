import numpy as np
import pytest

from vlmadv.encoders import AvgPoolBackend, ToyConvBackend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def avgpool():
    return AvgPoolBackend(image_hw=(32, 32), grid_hw=(4, 4), channels=3)


@pytest.fixture
def toyconv():
    return ToyConvBackend(image_hw=(32, 32), grid_hw=(4, 4), channels=3,
                          feature_dim=8, latent_dim=6, seed=0)


@pytest.fixture
def small_backends():
    """Both toy backends at a small resolution for fast optimizer loops."""
    return (
        AvgPoolBackend(image_hw=(16, 16), grid_hw=(4, 4), channels=3),
        ToyConvBackend(image_hw=(16, 16), grid_hw=(4, 4), channels=3,
                       feature_dim=6, latent_dim=4, seed=1),
    )


def random_image(rng, shape=(32, 32, 3), lo=0.0, hi=1.0):
    return lo + (hi - lo) * rng.random(shape)
