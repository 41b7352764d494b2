"""
Shared fixtures. The modules live flat at the repository root, so the root is
put on sys.path for the tests/ package.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _console import set_quiet                                  # noqa: E402
from pose_core import canonical_family_specs, default_skeleton, generate_family, window  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_console():
    set_quiet(True)
    yield


@pytest.fixture
def skeleton():
    return default_skeleton()


@pytest.fixture
def families():
    return canonical_family_specs()


@pytest.fixture
def small_dataset(families):
    """Windows (O=4, T=3) from two short sequences of each canonical family."""
    samples = []
    for spec in families:
        for seed in range(2):
            seq = generate_family(spec, num_frames=40, seed=100 * spec.family_id + seed)
            samples.extend(window(seq, O=4, T=3, stride=3))
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(0)
