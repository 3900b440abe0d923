import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loralign.kernels import tune_allocator

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pretrained():
    """Default-budget pre-training on fog, rain and snow (seed 0); shared by every module."""
    from loralign.trainer import TrainConfig, pretrain

    model, report = pretrain(("fog", "rain", "snow"), TrainConfig(mode="pretrain", seed=0))
    return model.state_dict(), report


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
