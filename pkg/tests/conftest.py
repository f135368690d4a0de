import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_matrix_problem(rng, n_blocks=3, dim=4, rows=2, mu_g=1.0, mu_dual=1.0):
    """Small dense problem with quadratic g and quadratic f_i*."""
    from spdhg.operators import BlockOperator, MatrixOp
    from spdhg.proxlib import SquaredL2DataFit, SquaredL2DataFitConjugate
    from spdhg.solvers import SaddleProblem

    A = BlockOperator([MatrixOp(rng.standard_normal((rows, dim))) for _ in range(n_blocks)])
    g = SquaredL2DataFit(rng.standard_normal(dim), 1.0 / mu_g)
    fc = [SquaredL2DataFitConjugate(rng.standard_normal(rows), mu_dual) for _ in range(n_blocks)]
    return SaddleProblem(A, fc, g)


# one PASS/FAIL line per acceptance criterion at the end of the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[int(name.split("_")[2])] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
