from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from helpers import ring_cameras

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cams():
    """Six cameras on a half ring around the origin."""
    return ring_cameras()
