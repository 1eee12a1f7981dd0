import os

import pytest

from stochqho.scenario import ScenarioConfig, TimeProfile

TWO_PI = 6.283185307179586
CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def static_config():
    return ScenarioConfig(t_min=-10.0, t_max=10.0, n_max=8)


@pytest.fixture
def ramp_config():
    return ScenarioConfig(omega_in=1.0, omega_out=1.6,
                          omega0_sq=TimeProfile.ramp(-2.0, 2.0, 1.0, 1.6 ** 2),
                          f0=TimeProfile.pulse(0.7, 1.0, 1.4), t_min=-30.0, t_max=40.0)


def config_path(name):
    return os.path.abspath(os.path.join(CONFIG_DIR, name))
