"""Shared fixtures.  The annual planner runs are session-scoped because each takes several seconds."""

from __future__ import annotations

import numpy as np
import pytest

from vstab.netmodel import _two_bus_dict, bundled_path, load_network, network_from_dict
from vstab.rms import load_contingencies
from vstab.synth import synth_profiles

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"AC{k} {'PASS' if ok else 'FAIL'}: {text}")


@pytest.fixture(scope="session")
def ieee39():
    return load_network(bundled_path("ieee39.json"))


@pytest.fixture(scope="session")
def profiles(ieee39):
    return synth_profiles(ieee39, seed=42)


@pytest.fixture(scope="session")
def contingencies():
    return load_contingencies(bundled_path("ieee39_contingencies.json"))


@pytest.fixture(scope="session")
def mild_contingencies():
    return load_contingencies(bundled_path("ieee39_contingencies_mild.json"))


@pytest.fixture(scope="session")
def step1_run(ieee39, profiles):
    from vstab.planner import step1_long_term

    return step1_long_term(ieee39, profiles, jobs=1)


@pytest.fixture(scope="session")
def step2_run(step1_run, profiles, contingencies):
    from vstab.planner import step2_short_term

    net1, rep1 = step1_run
    return step2_short_term(net1, profiles, rep1, contingencies, jobs=1)


@pytest.fixture(scope="session")
def step2_mild(step1_run, profiles, mild_contingencies):
    from vstab.planner import step2_short_term

    net1, rep1 = step1_run
    return step2_short_term(net1, profiles, rep1, mild_contingencies, jobs=1)


def two_bus(x=0.1, p=0.0, q=0.0, r=0.0):
    return network_from_dict(_two_bus_dict(x, p, q, r))


def two_bus_voltage(p, q, x):
    """High root of V^4 + (2Qx - 1)V^2 + (P^2 + Q^2)x^2 = 0 (slack at 1 pu, lossless line)."""
    b = 2 * q * x - 1
    c = (p * p + q * q) * x * x
    return float(np.sqrt((-b + np.sqrt(b * b - 4 * c)) / 2))


@pytest.fixture(scope="session")
def step1_idem(step1_run, profiles):
    from vstab.planner import step1_long_term

    net1, _ = step1_run
    return step1_long_term(net1, profiles, jobs=2)


def one_load_profiles(p, q):
    """Profiles for the two-bus network (per-unit on 100 MVA, one entry per hour)."""
    from vstab.qds import ProfileSet

    h = len(p)
    return ProfileSet(["L2"], np.array([p], dtype=float) * 100.0, np.array([q], dtype=float) * 100.0,
                      [], np.zeros((0, h)), np.zeros((0, h)))
