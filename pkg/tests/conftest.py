import numpy as np
import pytest
from hypothesis import settings

from dcenorm import generate_phantom
from dcenorm.phantom import PhantomConfig

settings.register_profile("suite", max_examples=60, derandomize=True, deadline=None)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """Default two-group phantom, generated once and shared read-only."""
    out = tmp_path_factory.mktemp("phantom-default")
    cfg = PhantomConfig()
    manifest = generate_phantom(cfg, str(out), jobs=4)
    return cfg, manifest
