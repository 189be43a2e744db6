from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_notes = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or rep.failed or rep.skipped:
        _outcomes[mark.args[0]].append(rep.passed and rep.when == "call")


@pytest.fixture
def note(request):
    """Attach a short measurement to the criterion line printed at the end of the run."""
    mark = request.node.get_closest_marker("criterion")
    return lambda text: _notes[mark.args[0]].append(text)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        detail = "; ".join(_notes[n])
        terminalreporter.write_line(f"criterion {n}: {status}" + (f" ({detail})" if detail else ""))
