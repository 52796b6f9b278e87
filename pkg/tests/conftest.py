import numpy as np
import pytest

from flowtune.catalog import catalog_from_frequencies, history_free_dataset, build_catalog, make_zipf_log
from flowtune.flownet import build_prefix_tree

ACCEPTANCE_LINES = []


@pytest.fixture
def tinycat():
    return catalog_from_frequencies({"ab": "A B", "ac": "A C", "d": "D"}, {"ab": 2, "ac": 1, "d": 3})


@pytest.fixture
def tinytree(tinycat):
    return build_prefix_tree(tinycat)


@pytest.fixture(scope="session")
def zipf100():
    ds = history_free_dataset(make_zipf_log(100, 1.0, 2000, seed=7))
    cat = build_catalog(ds)
    return ds, cat, build_prefix_tree(cat)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_report():
    def record(criterion, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
