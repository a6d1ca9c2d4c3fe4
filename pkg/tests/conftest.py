import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from groupseg.config import EngineConfig  # noqa: E402
from groupseg.core import GridSpec, LabelMap, default_protocol  # noqa: E402
from groupseg.phantom import phantom_session  # noqa: E402


@pytest.fixture(scope="session")
def protocol():
    return default_protocol()


@pytest.fixture(scope="session")
def config():
    return EngineConfig.default()


@pytest.fixture(scope="session")
def small_config(config):
    return config.with_grid(GridSpec((24, 24, 24), (6.0, 6.0, 6.0), "LIA"))


@pytest.fixture(scope="session")
def session():
    return phantom_session(seed=0, shape=(32, 32, 32), spacing=(5.0, 5.0, 5.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box_labels(shape=(12, 12, 12), protocol=None) -> LabelMap:
    """Left/right white-matter boxes with a cortex rim around each."""
    data = np.zeros(shape, dtype=np.uint16)
    data[2:10, 2:10, 2:6] = 3
    data[2:10, 2:10, 6:10] = 42
    data[3:9, 3:9, 3:5] = 2
    data[3:9, 3:9, 7:9] = 41
    return LabelMap(data, np.eye(4), protocol or default_protocol())


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n, text = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    prev = _CRITERIA.get(n)
    if prev is not None:
        status = status if prev[0] == "PASS" else prev[0]
        detail = "; ".join(d for d in (prev[2], detail) if d)
    _CRITERIA[n] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text, detail = _CRITERIA[n]
        line = f"{status} criterion {n}: {text}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
