import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; returns ``ok``."""
    def record(num: int, text: str, ok: bool) -> bool:
        request.config._acceptance[num] = f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {text}"
        print(request.config._acceptance[num])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
