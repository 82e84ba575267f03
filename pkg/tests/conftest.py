import numpy as np
import pytest

from cstr import ImagePair, ModelDescription, Rng, RunConfig, init_weights


TINY_CONFIG = RunConfig(layers=2, channels=8, heads=2)


@pytest.fixture(scope="session")
def tiny_model() -> ModelDescription:
    return ModelDescription(TINY_CONFIG, init_weights(TINY_CONFIG, span=16, seed=0))


@pytest.fixture()
def tiny_pair() -> ImagePair:
    rng = Rng(0)
    left = rng.generator.random((1, 16, 32), dtype=np.float32)
    right = rng.generator.random((1, 16, 32), dtype=np.float32)
    return ImagePair(left, right)
