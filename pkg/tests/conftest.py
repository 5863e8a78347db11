import numpy as np
import pytest

from itr.data import load_dataset
from itr.synthetic import write_planted_dataset


@pytest.fixture(scope="session")
def planted_dir(tmp_path_factory):
    return write_planted_dataset(tmp_path_factory.mktemp("planted"), n_users=120, n_items=150,
                                 n_clusters=4, per_user=8, n_groups=40, seed=7)


@pytest.fixture(scope="session")
def planted(planted_dir):
    return load_dataset(planted_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_lines(path, text):
    path.write_text(text)
    return path


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(label, passed, detail)``."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(label, passed, detail=""):
        status = "PASS" if passed else ("INFO" if passed is None else "FAIL")
        line = f"[{status}] {label}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
