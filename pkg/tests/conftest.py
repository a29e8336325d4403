import numpy as np
import pytest

from sketchbridge.line_drawing import build_pseudo_pairs, dog_operator
from sketchbridge.synthetic import face_corpus


@pytest.fixture(scope="session")
def op():
    return dog_operator()


@pytest.fixture(scope="session")
def corpus():
    return face_corpus(4, 2, size=64, seed=0)


@pytest.fixture(scope="session")
def toy_pairs(op, corpus):
    ids = [sid for sid, _ in corpus]
    return build_pseudo_pairs(op, [s.sketch for _, s in corpus], ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
