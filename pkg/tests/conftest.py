import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qsiam.siamnet import SiameseBranch, canonical_network, gen_random_weights  # noqa: E402


@pytest.fixture(scope="session")
def spec():
    return canonical_network()


@pytest.fixture(scope="session")
def weights(spec):
    return gen_random_weights(spec, seed=0)


@pytest.fixture(scope="session")
def branch(spec, weights):
    return SiameseBranch(spec, weights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
