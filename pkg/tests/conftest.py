"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_LINES: dict = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details = []
        self.ok = True

    def check(self, ok: bool, detail: str) -> None:
        self.ok = self.ok and bool(ok)
        self.details.append(("" if ok else "FAILED ") + detail)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"criterion {self.number} {status}  {self.title}: " + "; ".join(self.details)


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` returns a recorder; the test asserts ``rec.ok`` at the end."""
    made = []

    def make(number: int, title: str) -> Criterion:
        rec = Criterion(number, title)
        made.append(rec)
        return rec

    yield make
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else False
    for rec in made:
        if failed and rec.ok:
            rec.check(False, "test raised before all checks ran")
        _LINES[rec.number] = rec.line()
        print("\n" + rec.line())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
