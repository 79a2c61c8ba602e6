import numpy as np
import pytest

from hytnas import tensor


@pytest.fixture(autouse=True)
def f64_mode():
    """Tests run in float64 unless they opt out explicitly."""
    saved = tensor.default_dtype()
    tensor.set_default_dtype(np.float64)
    yield
    tensor.set_default_dtype(saved)


def rng(seed):
    return np.random.default_rng(seed)
