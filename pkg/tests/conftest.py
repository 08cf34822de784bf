import numpy as np
import pytest
import torch

from latentcir.toyworld import ToyWorld, WorldConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def world():
    return ToyWorld(WorldConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[str, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[name] = ("PASS" if report.passed else "FAIL", report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, props = _CRITERIA[name]
        detail = " ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{status} {name[len('test_criterion_'):]} {detail}".rstrip())
