import pytest

# (criterion number, title) -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (ok, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num:>2}. {title}: {detail}")


@pytest.fixture
def criterion():
    """``criterion(num, title, ok, detail)`` records and prints one verdict line."""
    def record(num, title, ok, detail=""):
        ACCEPTANCE[(num, title)] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {num:>2}. {title}: {detail}")
        return bool(ok)
    return record
