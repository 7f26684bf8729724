from collections import defaultdict

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# acceptance results: criterion number -> [(test name, passed, details)]
_CRITERIA = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing fixture counts against the criterion too
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA[marker.args[0]].append((item.name, rep.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        status = "PASS" if all(ok for _, ok, _ in results) else "FAIL"
        failed = [name for name, ok, _ in results if not ok]
        details = "; ".join(d for _, _, d in results if d)
        line = f"criterion {n}: {status}"
        if failed:
            line += f" (failed: {', '.join(failed)})"
        if details:
            line += f" | {details}"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
