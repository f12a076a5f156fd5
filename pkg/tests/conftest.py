import numpy as np
import pytest

from rgalign.diffcore import set_default_dtype


@pytest.fixture
def f64_mode():
    """Run a test in 64-bit default precision, restoring 32-bit after."""
    set_default_dtype("f64")
    yield
    set_default_dtype("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
