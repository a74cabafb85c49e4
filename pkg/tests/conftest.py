import numpy as np
import pytest

from smogup import autodiff as ad
from smogup.network import Model, ModelConfig


def tiny_config(**kw):
    base = dict(dim=16, k_backbone=8, heads=4, enc_hidden=16, dec_hidden=16, smog_hidden=16,
                coord_hidden=16, refine_hidden=16, num_freqs=4, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def f64():
    with ad.use_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Model(tiny_config())


@pytest.fixture
def tiny_model64():
    return Model(tiny_config(), dtype=np.float64)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
