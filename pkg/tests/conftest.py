import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anchorcal.synth import NoiseConfig, Perturbation, SimConfig, simulate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config(seed=0, n_frames=40, noiseless=False, perturb=None, vl_frames=8, **noise):
    cfg = SimConfig(seed=seed)
    cfg.trajectory.n_frames = n_frames
    cfg.vl.n_frames = vl_frames
    if noiseless:
        cfg.noise = NoiseConfig(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    for k, v in noise.items():
        setattr(cfg.noise, k, v)
    cfg.perturbation = perturb if perturb is not None else Perturbation()
    return cfg


@pytest.fixture(scope="session")
def noiseless_ds():
    """Short noiseless sequence whose initial calibration is the truth."""
    return simulate(small_config(seed=11, noiseless=True))


@pytest.fixture(scope="session")
def noisy_ds():
    return simulate(small_config(seed=12, n_frames=60, perturb=Perturbation.degraded()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
