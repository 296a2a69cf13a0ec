import pytest

# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def record(crit: str, ok: bool, detail: str) -> None:
    line = f"{crit} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[crit] = line
    print(line)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        terminalreporter.write_line(ACCEPTANCE[crit])
