import numpy as np
import pytest
import torch

from fulltarget.data import make_synthetic


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """4 classes, 16x16, small enough for seconds-long training."""
    return make_synthetic(40, num_classes=4, size=16, seed=0)


# -- acceptance summary -------------------------------------------------------------

_CRITERIA = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
