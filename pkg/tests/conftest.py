import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")


def random_psd(m, seed, scale=1.0, rank=None):
    """Random PSD matrix with eigenvalues of order ``scale``."""
    rng = np.random.default_rng(seed)
    r = m if rank is None else rank
    B = rng.standard_normal((m, r))
    return scale * (B @ B.T) / r


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
