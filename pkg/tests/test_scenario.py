import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochqho.scenario import (ProfileRangeError, ScenarioConfig, TimeProfile, default_window,
                               load_config, validate)

from conftest import config_path


def test_profile_kinds():
    assert TimeProfile.constant(2.5)(3.0) == 2.5
    s = TimeProfile.step(1.0, 0.0, 4.0)
    assert s(1.0) == 0.0 and s(1.0 + 1e-9) == 4.0
    w = TimeProfile.window(0.0, 2.0, 3.0)
    np.testing.assert_array_equal(w(np.array([-1.0, 0.0, 1.0, 2.0, 3.0])), [0, 0, 3, 0, 0])
    p = TimeProfile.pulse(2.0, 1.0, 0.5)
    assert p(1.0) == 2.0
    assert math.isclose(p(1.5), 2.0 * math.exp(-1.0))
    tab = TimeProfile.tabulated([0.0, 1.0, 2.0], [0.0, 2.0, 0.0])
    assert tab(0.5) == 1.0


def test_tabulated_outside_range():
    tab = TimeProfile.tabulated([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ProfileRangeError):
        tab(1.5)


@pytest.mark.parametrize("bad", [
    dict(kind="nope"),
    dict(kind="ramp", t0=1.0, t1=1.0),
    dict(kind="window", t0=2.0, t1=1.0),
    dict(kind="pulse", tau=0.0),
])
def test_profile_rejects(bad):
    with pytest.raises(ValueError):
        TimeProfile(**bad)


def test_window_from_dict_defaults_to_unit_height():
    w = TimeProfile.from_dict({"kind": "window", "t_on": 0.0, "t_off": 1.0})
    assert w == TimeProfile.window(0.0, 1.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))
def test_ramp_stays_between_endpoints(before, after, t):
    r = TimeProfile.ramp(-1.0, 1.0, before, after)
    v = r(t)
    assert min(before, after) - 1e-12 <= v <= max(before, after) + 1e-12


@given(st.floats(0.1, 5.0), st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
@settings(max_examples=30)
def test_hash_roundtrip(w, eps, seed):
    c = ScenarioConfig(omega_in=w, omega_out=w, omega0_sq=TimeProfile.constant(w * w),
                       eps1=eps, seed=seed)
    again = ScenarioConfig.from_dict(c.to_dict())
    assert again == c
    assert again.scenario_hash() == c.scenario_hash()
    assert c.with_(seed=seed + 1).scenario_hash() != c.scenario_hash()


def test_validate_good_and_bad(static_config):
    assert validate(static_config) == []
    bad = static_config.with_(omega0_sq=TimeProfile.constant(2.0))
    assert any(v.startswith("omega0_sq") for v in validate(bad))
    bad = static_config.with_(f0=TimeProfile.constant(0.1))
    assert any(v.startswith("f0") for v in validate(bad))
    bad = static_config.with_(eps1=0.1, p1=TimeProfile.constant(1.0))
    assert any(v.startswith("p1") for v in validate(bad))
    bad = static_config.with_(t_min=5.0, t_max=1.0)
    assert any(v.startswith("t_min") for v in validate(bad))
    bad = static_config.with_(eps2=-1.0)
    assert any(v.startswith("eps2") for v in validate(bad))


def test_noise_amplitudes_switch_on():
    c = ScenarioConfig(eps1=0.02, p1=TimeProfile.window(0.0, 5.0), t1=1.0)
    a = c.noise_amp1(np.array([0.5, 1.0, 2.0, 6.0]))
    np.testing.assert_allclose(a, [0.0, 0.0, math.sqrt(0.04), 0.0])
    assert c.diff1(2.0) == pytest.approx(0.02)
    assert c.noise_amp2(2.0) == 0.0


def test_default_window():
    assert default_window([0.0, 3.0], 2.0) == (-5.0, 8.0)


@pytest.mark.parametrize("name", ["no_noise", "force_noise", "frequency_window", "general",
                                  "ramp_pulse"])
def test_shipped_configs_valid(name):
    c = load_config(config_path(f"{name}.toml"))
    assert validate(c) == []


def test_unknown_key_rejected():
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"omega": 1.0})
