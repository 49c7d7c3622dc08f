import re

import pytest

_AC = re.compile(r"test_ac(\d+)_")
_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _AC.search(item.name)
    if m is None or rep.when == "teardown" and rep.passed:
        return
    key = int(m.group(1))
    ok = rep.passed and not getattr(rep, "wasxfail", False)
    if rep.when == "call" or not ok:
        prev = _outcomes.get(key, (True, item.name))
        _outcomes[key] = (prev[0] and ok, item.name if not ok else prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes):
        ok, name = _outcomes[key]
        terminalreporter.write_line(f"AC{key:<2} {'PASS' if ok else 'FAIL'}  {name}")
