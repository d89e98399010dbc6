import numpy as np
import pytest

CRITERIA = {
    1: "gradient integrity",
    2: "reduction equivalence",
    3: "locality contract",
    4: "metric oracle equivalence",
    5: "open-set machinery",
    6: "trainability",
    7: "end-to-end tracing",
    8: "protocol fidelity",
    9: "determinism and round-trip",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        got = _outcomes.get(n)
        if got is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(o == "passed" for o in got) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
