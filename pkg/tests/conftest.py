import numpy as np
import pytest

from mlmc_diffusion import registry
from mlmc_diffusion.schedules import NoiseSchedule


@pytest.fixture(scope="session")
def gauss4d():
    return registry.get_benchmark("gauss-4d")


@pytest.fixture(scope="session")
def mix4d():
    return registry.get_benchmark("mix-2c-4d")


def random_schedule(rng, T):
    """Strictly decreasing ladder with gammas[0] = 1 and random increments."""
    drops = rng.uniform(0.05, 1.0, size=T)
    logs = -np.cumsum(drops) * rng.uniform(0.5, 12.0) / drops.sum()
    return NoiseSchedule(np.concatenate([[1.0], np.exp(logs)]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def report():
    def record(criterion: int, ok: bool, detail: str):
        ACCEPTANCE[criterion] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
