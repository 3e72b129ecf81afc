import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("turbi", deadline=None, max_examples=40)
settings.load_profile("turbi")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria: one pass/fail line per criterion in the terminal summary
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid): test that decides acceptance criterion `cid`")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the current acceptance test."""
    def add(text):
        request.node.user_properties.append(("detail", text))
        print(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    cid = marker.args[0]
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    prev = _criteria.get(cid)
    if prev is None or prev[0] == "PASS":
        _criteria[cid] = ("PASS" if rep.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        status, details = _criteria[cid]
        terminalreporter.write_line(f"{cid} {status}" + (f": {details}" if details else ""))
