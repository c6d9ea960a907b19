import numpy as np
import pytest
import scipy.linalg
from hypothesis import HealthCheck, settings

from btaselinv.bta_core import extract_pattern, to_dense

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def dense_oracle(A):
    """Selected inverse computed from a dense Cholesky solve against I."""
    D = to_dense(A)
    c = scipy.linalg.cho_factor(D, lower=True)
    return extract_pattern(scipy.linalg.cho_solve(c, np.eye(A.N)), A.n, A.b, A.a)


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line per acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
