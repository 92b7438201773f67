import numpy as np
import pytest

from stereoinject.geometry import RigidTransform
from stereoinject.harness.config import RigConfig
from stereoinject.rig import stereo_rig

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"acceptance criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rig():
    """Default full-resolution stereo pair converging on the origin."""
    return stereo_rig()


@pytest.fixture
def home():
    return RigidTransform.identity()


@pytest.fixture(scope="session")
def cfg():
    return RigConfig()


@pytest.fixture(scope="session")
def quiet_cfg():
    """Everything noise-free."""
    return RigConfig(calibration_noise_px=0.0, detection_noise_px=0.0,
                     angle_noise_deg=0.0, artifacts_per_image=0,
                     hexapod_resolution_mm=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
