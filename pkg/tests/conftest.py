import numpy as np
import pytest

from aimfas import autodiff as ad

# criterion number -> (passed, one-line description, detail lines); filled by test_acceptance
ACCEPTANCE: dict = {}


@pytest.fixture(autouse=True)
def _float64_and_grad():
    """Every test starts in the default float64, gradient-enabled state."""
    ad.set_default_dtype(np.float64)
    with ad.set_grad_enabled(True):
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, details = ACCEPTANCE[n]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
        for line in details:
            tr.write_line(f"    {line}")
