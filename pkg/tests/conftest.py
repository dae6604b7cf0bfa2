import pytest

# (criterion number, label, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(number, label, passed, detail=""):
        ACCEPTANCE_RESULTS.append((number, label, bool(passed), detail))
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {label}"
        print(line + (f"  [{detail}]" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {label}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
