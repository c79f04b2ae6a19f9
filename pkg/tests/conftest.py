import pytest

from acceptance_report import REPORT


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(REPORT):
        ok, title, detail = REPORT[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")


@pytest.fixture
def report():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        REPORT[number] = (bool(ok), title, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
        assert ok, detail

    return record
