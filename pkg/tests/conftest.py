import numpy as np
import pytest
from hypothesis import settings

from ancmatch.tensor_core import Rng

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return Rng(1234)


def rand_tensor(r: Rng, shape, dtype=np.float64):
    return r.normal(0.0, 1.0, shape, dtype=dtype)
