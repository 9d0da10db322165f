import numpy as np
import pytest

from prism.waveform import Constellation


@pytest.fixture
def qpsk():
    return Constellation.from_name("QPSK")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
