import numpy as np
import pytest

from ctforecast.cohort import PhantomConfig, generate_phantom_cohort
from ctforecast.preprocess import preprocess_cohort

# small grid keeps unit tests fast; acceptance tests use the full desk-scale setup
TINY_CONFIG = PhantomConfig(
    n_patients=4,
    grid=(32, 32, 8),
    spacing_mm=(1.0, 1.0, 3.0),
    tumor_axes_mm=((5.0, 8.0), (5.0, 8.0), (4.5, 6.0)),
    center_jitter_mm=(2.0, 2.0, 1.0),
    max_followups=4,
    seed=11,
)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_cohort")
    return generate_phantom_cohort(TINY_CONFIG, out)


@pytest.fixture(scope="session")
def tiny_preprocessed(tiny_cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_prep")
    return preprocess_cohort(tiny_cohort, out, margin=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
