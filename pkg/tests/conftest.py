import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from biphoton.config import ExperimentConfig  # noqa: E402
from biphoton.core import CalibrationConfig  # noqa: E402
from biphoton.estimator import FitRegion  # noqa: E402
from biphoton.simulator import CameraConfig, OpticsSimConfig, SourceConfig  # noqa: E402


@pytest.fixture
def small_config():
    """64x64 entangled configuration that runs in about a second per plane."""
    return ExperimentConfig(
        source=SourceConfig(sigma_pump=40e-6, pairs_per_frame_mean=20000, sigma_psum=3000, sigma_pdiff=5000),
        camera=CameraConfig(width=64, height=64),
        fit_region=FitRegion(40),
        n_frames=200,
    )


@pytest.fixture
def classical_config():
    """Same sensor, but source widths with sigma_pair * sigma_psum = 0.8."""
    return ExperimentConfig(
        source=SourceConfig(
            sigma_pump=40e-6, pairs_per_frame_mean=20000, sigma_pair=20e-6, sigma_psum=40000, sigma_pdiff=10000
        ),
        optics=OpticsSimConfig(calibration=CalibrationConfig(pupil_relay_magnification=0.1)),
        camera=CameraConfig(width=64, height=64),
        fit_region=FitRegion(40),
        n_frames=200,
    )


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
