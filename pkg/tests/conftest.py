import numpy as np
import pytest

from mltr import autodiff as ad


@pytest.fixture(autouse=True)
def finite_checks():
    """Every forward op in the suite must produce finite values."""
    ad.CHECK_FINITE = True
    ad.reset_tape()
    yield
    ad.CHECK_FINITE = False
    ad.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
