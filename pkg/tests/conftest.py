import numpy as np
import pytest

from nckrm.kernels import FAMILIES

# moderate ranges keep relative tolerances meaningful
_RANGES = {
    "scale_pos": (0.1, 3.0),
    "scale": (-2.0, 2.0),
    "decay": (0.05, 0.95),
    "pole": (-0.95, 0.95),
    "corr": (-0.99, 0.99),
    "spread": (0.0, 2.0),
}


def random_eta(family, rng):
    """Random interior hyper-parameters for ``family``."""
    kinds = FAMILIES[family].kinds
    return np.array([rng.uniform(*_RANGES[k]) for k in kinds])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



_criteria = {}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    status = "FAIL" if rep.failed else "SKIP" if rep.skipped else "PASS"
    prev = _criteria.get(number, (title, "PASS"))[1]
    _criteria[number] = (title, max(prev, status, key=_RANK.get))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
