import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    from trajsynth import _accel

    with _accel.backend(request.param):
        yield request.param


def overfit_data():
    """Four shifted copies of one curve (L = 32) sharing a single condition."""
    s = np.linspace(-0.6, 0.6, 32)
    base = np.stack([s, 0.5 * np.sin(3 * s)], 1)
    offsets = np.array([[0.35, 0.35], [0.35, -0.35], [-0.35, 0.35], [-0.35, -0.35]])
    return np.stack([base + o for o in offsets])


@pytest.fixture(scope="session")
def overfit_model():
    """Denoiser trained to memorize :func:`overfit_data`; returns ``(model, members, condition)``."""
    from trajsynth.diffusion import DiffusionConfig, train_diffusion

    X = overfit_data()
    cond = np.array([0.1, 0.2, 0.3, 0.4, 0.05, 0.05, 0.05, 0.05])
    cfg = DiffusionConfig(widths=(16, 32), time_dim=32, emb_dim=64, T=50, epochs=1000, batch_size=16,
                          learning_rate=2e-3, ema_decay=0.99)
    model = train_diffusion(np.repeat(X, 16, 0), np.tile(cond, (64, 1)), cfg)
    return model, X, cond


_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    num = int(name.split("_")[2])
    measured = dict(report.user_properties).get("measured", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[num] = (outcome, name, measured)
    elif report.when == "teardown" and report.failed:
        _CRITERIA[num] = ("FAIL", name, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcome, name, measured = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {outcome}  {name[len('test_criterion_00_'):]}"
                                    + (f"  [{measured}]" if measured else ""))
