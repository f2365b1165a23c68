import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diracwall.greens_slab import PotentialRep

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_potential(rng, interval=(-0.3, 0.3), n_x=3, n_k=3, channels=(0, 1, 2, 3), scale=0.5, kind="hermite"):
    c = np.zeros((n_x + 1, n_k + 1, 4))
    c[:, :, list(channels)] = scale * rng.standard_normal((n_x + 1, n_k + 1, len(channels)))
    return PotentialRep(interval, c, kind)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
