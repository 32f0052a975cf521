import sys

import numpy as np
import pytest

from rnada.data import GenSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return GenSpec(n_kitchens=2, n_verbs=3, n_nouns=3, n_frames=3, frame_dim=4, latent_dim=4,
                   samples_per_kitchen=6, eval_per_kitchen=4)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate(tiny_spec, seed=7)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acc.RESULTS:
            terminalreporter.write_line(line)
