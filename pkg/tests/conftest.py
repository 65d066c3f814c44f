import pytest

from pgps.runner import synthetic_dataset


@pytest.fixture(scope="session")
def blob_dataset():
    return synthetic_dataset(n_train=4, n_val=2, seed=0)


# volumes exactly the size of the toy maximal patch: validation is one tile
SMALL_DATA = {"n_train": 2, "n_val": 1, "shape": (20, 48, 40), "n_blobs": 2, "radius_range": (3.0, 7.0), "seed": 0}


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_dataset(**SMALL_DATA)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
