import pytest

_CRITERIA = {}


class CriterionLog:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.passed = False
        self.detail = "did not finish"

    def check(self, ok: bool, detail: str) -> bool:
        self.passed, self.detail = bool(ok), detail
        return self.passed


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the session summary prints a line per criterion."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    log = CriterionLog(number, title)
    _CRITERIA[number] = log
    return log


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        c = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if c.passed else 'FAIL'}] {number}. {c.title}: {c.detail}")
