import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "anyq",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
    derandomize=True,
)
settings.load_profile("anyq")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_RESULTS_KEY = "anyq_acceptance"


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``record(number, title, passed, detail, elapsed, budget)``."""
    results = request.config.__dict__.setdefault(_RESULTS_KEY, {})

    def record(number, title, passed, detail, elapsed, budget):
        status = "PASS" if passed else "FAIL"
        line = f"[{number:>2}] {status}  {title}: {detail} ({elapsed:.1f}s of {budget:g}s)"
        results[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.__dict__.get(_RESULTS_KEY)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
