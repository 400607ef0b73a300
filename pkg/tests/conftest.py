import numpy as np
import pytest

from billiards.geometry import Domain, annulus, disk, ellipse, polar_cos3
from billiards.jacobians import jacobian_corpus


@pytest.fixture(scope="session")
def corpus():
    return jacobian_corpus()


@pytest.fixture(scope="session")
def scenes():
    return {
        "disk": disk(),
        "annulus": annulus(1.0, 0.3),
        "ellipse": Domain(ellipse(2.0, 1.0)),
        "polar": Domain(polar_cos3(0.3)),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------

CRITERIA = {
    1: "jacobian entries vs finite differences",
    2: "determinant identities",
    3: "sticky grazing construction",
    4: "conservation under transport",
    5: "bounce count oracle",
    6: "chord monotonicity near inflection",
    7: "change-of-variable determinant",
    8: "kinetic toys",
    9: "grazing measure sampling",
}
_outcomes: dict[int, list[tuple[str, bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(mark.args[0], []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, label in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            continue
        failed = [name for name, ok in got if not ok]
        status = "FAIL" if failed else "PASS"
        extra = f"  (failing: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {n}: {status}  {label}{extra}")
