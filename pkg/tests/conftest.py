import re

import numpy as np
import pytest

from riscal.channel import ScenarioConfig, build_realization, scale_noise_to_snr
from riscal.config import DEFAULT_REALIZATION_SEED

_CRITERIA = {}


def record_criterion(number, ok: bool, detail: str):
    """Store one acceptance line; printed in the terminal summary."""
    _CRITERIA[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def _order(number):
    m = re.match(r"(\d+)(.*)", str(number))
    return int(m.group(1)), m.group(2)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=_order):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def cfg():
    return ScenarioConfig.indoor()


@pytest.fixture(scope="session")
def real(cfg):
    return build_realization(cfg, DEFAULT_REALIZATION_SEED)


@pytest.fixture(scope="session")
def real30(real):
    return scale_noise_to_snr(real, 30.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
