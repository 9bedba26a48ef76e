import logging
from pathlib import Path

import numpy as np
import pytest

from adaptive_ampc.config import load_config

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = ROOT / "artifacts"


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture(scope="session")
def consts(config):
    return config.constants


@pytest.fixture(scope="session")
def theta_nom(config):
    return config.theta_nom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True, scope="session")
def _quiet_numba():
    logging.getLogger("numba").setLevel(logging.WARNING)


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        passed, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
