import numpy as np
import pytest

from pyrasal import gradcheck
from pyrasal.tensor import Tensor, wide_precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def wide():
    with wide_precision():
        yield


def assert_gradcheck(fn, leaves, seed=0, per_leaf=6, tol=gradcheck.THRESHOLD):
    """Central-difference check of ``fn()`` w.r.t. ``leaves`` (float64 tensors)."""
    res = gradcheck.check("adhoc", fn, leaves, np.random.default_rng(seed), per_leaf=per_leaf)
    assert res.max_rel_error < tol, f"max rel err {res.max_rel_error:.3e} at {res.worst}"
    return res


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# -- acceptance summary ----------------------------------------------------------
_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" or report.outcome != "passed":
        _ACCEPTANCE.setdefault(name, "PASS" if report.passed else "FAIL")
        if report.failed:
            _ACCEPTANCE[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in mod.CRITERIA.items():
        status = _ACCEPTANCE.get(name, "NOT RUN")
        detail = mod.MEASURED.get(name, "")
        terminalreporter.write_line(f"{status:<7} criterion {label}" + (f"  [{detail}]" if detail else ""))
