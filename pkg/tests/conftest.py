import numpy as np
import pytest

from fslab.encoder import EncoderConfig, init_encoder
from fslab.tensor import Tensor


TINY = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=2, num_heads=2, output_dim=6, seed=0)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_encoder():
    return init_encoder(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
