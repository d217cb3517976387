import pytest

_ACCEPTANCE: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.get_closest_marker("acceptance") and (rep.when == "call" or rep.outcome != "passed"):
        lines = [ln for ln in rep.capstdout.splitlines() if ln.startswith("ACCEPTANCE")]
        status = "PASS" if rep.passed else "FAIL"
        _ACCEPTANCE[item.name] = lines[-1] if lines else f"ACCEPTANCE {item.name}: {status}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[name])
