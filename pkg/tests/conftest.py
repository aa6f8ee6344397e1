import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_line():
    def record(n: int, ok: bool, detail: str) -> None:
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
