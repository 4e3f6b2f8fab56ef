import numpy as np
import pytest

from edgeleak.graph import Dataset, SparseGraph, generate_er, make_sbm_dataset

_acceptance = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        key = report.nodeid
        if key in _acceptance:
            _acceptance[key]["outcome"] = report.outcome
            _acceptance[key]["duration"] = report.duration


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _acceptance[item.nodeid] = {"number": number, "title": title, "outcome": "not run", "duration": 0.0}


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_acceptance.values(), key=lambda e: e["number"]):
        status = {"passed": "PASS", "failed": "FAIL"}.get(entry["outcome"], entry["outcome"].upper())
        terminalreporter.write_line(
            f"[{status}] {entry['number']:>2}. {entry['title']} ({entry['duration']:.1f}s)"
        )


@pytest.fixture
def two_triangles():
    return SparseGraph.from_edges(6, [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)])


@pytest.fixture(scope="session")
def small_sbm():
    return make_sbm_dataset([30, 30], 0.3, 0.02, seed=0)


@pytest.fixture
def random_dataset():
    """Factory: ER graph, Gaussian features, random labels, every node in train."""

    def make(n, k, d, c, seed):
        g = generate_er(n, k, seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d))
        y = rng.integers(0, c, n)
        none = np.array([], dtype=np.int64)
        return Dataset(g, x, y, np.arange(n), none, none, c)

    return make
