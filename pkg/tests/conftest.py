"""Acceptance registry: each criterion records one verdict line, printed in the terminal summary."""
import pytest

RESULTS = {}


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def record(self, passed, detail):
        RESULTS[self.number] = (self.title, bool(passed), detail)
        print(f"criterion {self.number}: {'PASS' if passed else 'FAIL'} {self.title}: {detail}")
        assert passed, f"criterion {self.number} failed: {detail}"


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, passed, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
