import pytest

CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion as PASS/FAIL for the summary."""
    box = {}

    def mark(num, label):
        box["key"] = (num, label)

    yield mark
    if "key" in box:
        rep = getattr(request.node, "rep_call", None)
        CRITERIA[box["key"]] = rep is not None and rep.passed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (num, label), ok in sorted(CRITERIA.items()):
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}: {label}")
