"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

from collections import defaultdict

import pytest

_outcomes: dict[int, list[tuple[str, bool]]] = defaultdict(list)
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.fixture
def measured(request):
    """``measured(text)`` attaches a measurement to the test's criterion summary line."""
    n = request.node.get_closest_marker("criterion").args[0]
    return lambda text: _notes[n].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a criterion test counts as failed if setup, call or teardown failed
    if report.when == "call" or report.failed:
        _outcomes[marker.args[0]].append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        ok = all(passed for _, passed in results)
        failed = [name for name, passed in results if not passed]
        detail = f"{len(results)} test(s)" + (f"; failed: {', '.join(failed)}" if failed else "")
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        for text in _notes[n]:
            terminalreporter.write_line(f"    {text}")
