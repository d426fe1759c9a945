import numpy as np
import pytest

from vstab.netmodel import apply_compensation, network_from_dict
from vstab.powerflow import solve_power_flow
from vstab.rms import (
    BusFault,
    ClearFault,
    DynamicsError,
    LineFault,
    TripGenerator,
    dynamic_compensator,
    event_from_dict,
    event_to_dict,
    halve_step_check,
    initialize_dynamics,
    post_event_power_flow,
    run_rms,
)

from oracles import equal_area_cct, smib_dict, smib_emf


@pytest.fixture(scope="module")
def smib():
    net = network_from_dict(smib_dict())
    sol = solve_power_flow(net)
    return sol, initialize_dynamics(net, sol)


@pytest.fixture(scope="module")
def base39(ieee39):
    return initialize_dynamics(ieee39, solve_power_flow(ieee39))


@pytest.fixture(scope="module")
def flat39(base39):
    return run_rms(base39, [], 10.0, 0.005)


def smib_stable(st, t_clear):
    tr = run_rms(st, [BusFault(0.1, 1), ClearFault(0.1 + t_clear)], 2.5, 0.001)
    return tr.completed and np.max(tr.states["delta"][0]) < np.pi


def test_flat_run(base39, flat39):
    assert flat39.completed
    dv = np.abs(flat39.v_mag - np.abs(base39.v0)[:, None]).max()
    assert dv <= 1e-6


def test_initial_derivative_vanishes(base39):
    assert base39.derivative_norm() <= 1e-9


def test_zero_duration_fault_is_noop(base39, flat39):
    tr = run_rms(base39, [BusFault(1.0, 16), ClearFault(1.0)], 10.0, 0.005)
    assert tr.completed
    assert np.array_equal(tr.t, flat39.t)
    assert np.abs(tr.v_mag - flat39.v_mag).max() <= 1e-9


def test_smib_initial_angle(smib):
    sol, st = smib
    _, d0 = smib_emf(sol)
    assert abs(st.x0[0, 0] - d0) <= 1e-9


def test_smib_critical_clearing_time(smib):
    sol, st = smib
    tc = equal_area_cct(sol)
    assert 0.1 < tc < 0.4
    assert smib_stable(st, tc - 0.005)
    assert not smib_stable(st, tc + 0.005)


def test_angle_gauge(base39):
    # rotating every angle together leaves magnitudes untouched
    shifted = initialize_dynamics(base39.net, solve_power_flow(base39.net))
    shifted.x0[:, 0] += 0.3
    shifted.v0 = shifted.v0 * np.exp(0.3j)
    evs = [BusFault(0.2, 16), ClearFault(0.3)]
    a = run_rms(base39, evs, 1.0, 0.005)
    b = run_rms(shifted, evs, 1.0, 0.005)
    assert np.abs(a.v_mag - b.v_mag).max() <= 1e-9


def test_bundled_contingency_settles(ieee39, contingencies):
    c = contingencies[0]
    st = initialize_dynamics(ieee39, solve_power_flow(ieee39))
    tr = run_rms(st, c["events"], c["t_end"], 0.005)
    assert tr.completed
    during = (tr.t > 2.5) & (tr.t < 2.6)
    assert tr.v_mag[:, during].min() < 0.5
    assert tr.final_max_derivative <= 1e-4
    ref = post_event_power_flow(st, c["events"])
    assert ref.converged
    assert np.abs(tr.final_voltages() - ref.v_mag).max() <= 1e-3


def test_halve_step(ieee39, contingencies):
    c = contingencies[0]
    st = initialize_dynamics(ieee39, solve_power_flow(ieee39))
    res = halve_step_check(st, c["events"], c["t_end"], 0.005)
    assert res["completed"]
    assert res["max_dv"] <= 1e-3


def test_halve_step_flat(smib):
    _, st = smib
    assert halve_step_check(st, [], 2.0, 0.01)["max_dv"] <= 1e-9


def test_dynamic_compensator_within_rating(ieee39):
    net = apply_compensation(ieee39, dynamic_compensator(8, 50.0))
    st = initialize_dynamics(net, solve_power_flow(net))
    tr = run_rms(st, [BusFault(1.0, 8), ClearFault(1.1)], 3.0, 0.005)
    assert tr.completed
    assert tr.q_comp.shape[0] == 1
    assert np.abs(tr.q_comp).max() <= 50.0 + 1e-9
    # the device backs the voltage up during the fault
    assert tr.q_comp[0].max() > 40.0


def test_dynamic_compensator_follows_lag(ieee39):
    """Re-integrate the regulator from the recorded bus voltage with the same trapezoidal rule."""
    net = apply_compensation(ieee39, dynamic_compensator(8, 50.0, response_time=0.1))
    st = initialize_dynamics(net, solve_power_flow(net))
    evs = [BusFault(1.0, 8), ClearFault(1.1)]
    tr = run_rms(st, evs, 3.0, 0.005)
    cp = st.comps
    k, vref, rating, tc = cp.k[0], cp.vref[0], cp.rating[0], cp.t[0]
    vm = tr.v_at(8)
    q = tr.q_comp[0] / net.mva_base

    def rate(qq, v):
        d = (-qq + k * (vref - v)) / tc
        return 0.0 if (qq >= rating and d > 0) or (qq <= -rating and d < 0) else d

    err = 0.0
    for n in range(len(tr.t) - 1):
        if any(abs(tr.t[n + 1] - e.time) < 1e-12 for e in evs):
            continue  # the stored sample at an event is post-event
        h = tr.t[n + 1] - tr.t[n]
        g = h / (2 * tc)
        pred = q[n] + 0.5 * h * rate(q[n], vm[n])
        ref = np.clip((pred + g * k * (vref - vm[n + 1])) / (1 + g), -rating, rating)
        err = max(err, abs(ref - q[n + 1]))
    assert err <= 1e-9


def test_pmax_exceeded():
    net = network_from_dict(smib_dict(governor={"r": 0.05, "tg": 0.5, "pmax": 50.0}))
    with pytest.raises(DynamicsError, match="exceeds Pmax"):
        initialize_dynamics(net, solve_power_flow(net))


def test_event_validation(smib):
    _, st = smib
    with pytest.raises(DynamicsError):
        run_rms(st, [BusFault(3.0, 1)], 2.0)
    with pytest.raises(DynamicsError):
        event_from_dict({"kind": "Meteor", "time": 1.0})


@pytest.mark.parametrize("ev", [BusFault(1.0, 16), LineFault(2.5, "9-39", 0.99), ClearFault(2.6, True),
                                TripGenerator(2.66, "G03")])
def test_event_round_trip(ev):
    assert event_from_dict(event_to_dict(ev)) == ev
