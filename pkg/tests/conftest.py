import numpy as np
import pytest

from facecnn import data as D


@pytest.fixture(scope="session")
def synth_set(tmp_path_factory):
    """Twelve synthetic 200x200 images and their manifest."""
    out = tmp_path_factory.mktemp("synth")
    m = D.generate_synthetic(seed=3, n=12, out_dir=out)
    return out, m


@pytest.fixture
def rng():
    return np.random.default_rng(0)
