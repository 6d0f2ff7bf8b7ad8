import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, status: str, detail: str) -> None:
    """Remember the outcome of an acceptance criterion for the end-of-run summary."""
    ACCEPTANCE[number] = (status, detail)
    print(f"criterion {number}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {detail}")
