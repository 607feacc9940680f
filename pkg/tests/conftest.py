import pytest

from helpers import CRITERIA
from weakseg.nn import make_rng


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        rows = CRITERIA[num]
        ok = all(r[0] for r in rows)
        detail = "; ".join(r[1] for r in rows if r[1])
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return make_rng(1234)
