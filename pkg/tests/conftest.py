import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sparse(rng, extent, channels, density=0.3, cls=None):
    """Random tensor of ``cls`` with roughly ``density`` of the cells stored."""
    from voxprune.voxel import SparseBEVTensor, SparseVoxelTensor

    cls = cls or (SparseVoxelTensor if len(extent) == 3 else SparseBEVTensor)
    occ = rng.random(extent) < density
    coords = np.argwhere(occ)
    feats = rng.normal(size=(len(coords), channels))
    return cls(coords, feats, tuple(extent))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
