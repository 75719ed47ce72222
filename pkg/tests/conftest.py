import pytest

VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
