import json

import numpy as np
import pytest

from vstab.metrics import count_violations
from vstab.netmodel import DYNAMIC, STATIC
from vstab.planner import (
    InfeasibleError,
    IterationCapError,
    PlannerConfig,
    contingency_window,
    post_contingency_network,
    run_two_step,
    step1_long_term,
    step2_short_term,
)
from vstab.qds import constant_profiles, hour_injections, run_qds
from vstab.qv import trace_qv_curve, required_delta_q
from vstab.rms import BusFault, ClearFault, LineFault, TripGenerator

from conftest import one_load_profiles, two_bus

X = 0.2


def test_violation_free_scenario(ieee39):
    net, rep = step1_long_term(ieee39, constant_profiles(ieee39, 24), jobs=1)
    assert rep.n_iterations == 1
    assert rep.total_mvar == 0.0
    assert all(v == 0.0 for v in rep.dq_long.values())
    assert net is ieee39


def test_clean_network_no_contingencies(ieee39):
    _, rep = run_two_step(ieee39, constant_profiles(ieee39, 24), [], jobs=1)
    assert rep.verified
    assert all(v == 0.0 for v in rep.combined.values())
    assert rep.to_dict()["combined_ratings_mvar"] == {}


def test_two_bus_single_hour_matches_standalone():
    net = two_bus(X)
    prof = one_load_profiles([0.9, 1.2, 0.9], [0.1, 0.1, 0.1])
    cfg = PlannerConfig()
    run = run_qds(net, prof, cfg.pf_options, 1)
    assert count_violations(run, cfg.band) == 1
    net1, rep = step1_long_term(net, prof, cfg, jobs=1)
    curve = trace_qv_curve(net, 2, hour_injections(prof, 1), cfg.qv_range, cfg.qv_step, cfg.pf_options, 1)
    assert rep.dq_long[2] == required_delta_q(curve, cfg.target)
    assert rep.dq_long[1] == 0.0
    assert rep.n_iterations == 2
    assert rep.final_violations == 0
    assert rep.iterations[0]["installed"][0]["hour"] == 1
    assert [c.kind for c in net1.compensators] == [STATIC]


def test_two_bus_infeasible():
    prof = one_load_profiles([1.2, 6.0, 1.2], [0.2, 0.3, 0.2])
    with pytest.raises(InfeasibleError) as exc:
        step1_long_term(two_bus(X), prof, jobs=1)
    assert exc.value.details["step"] == 1
    assert exc.value.details["skipped"]


def test_iteration_cap():
    prof = one_load_profiles([0.9, 1.2, 0.9], [0.1, 0.1, 0.1])
    with pytest.raises(IterationCapError):
        step1_long_term(two_bus(X), prof, PlannerConfig(max_iter=1), jobs=1)


def test_config_round_trip():
    cfg = PlannerConfig(margin=0.02, beta=0.03, top_k=2, contingencies=None, dt=0.01)
    again = PlannerConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        PlannerConfig.from_dict({"marjin": 0.1})
    with pytest.raises(ValueError):
        PlannerConfig(beta=-1.0)
    with pytest.raises(ValueError):
        PlannerConfig(rank_order=("f_n", "f_n", "t_v"))


def test_contingency_window():
    evs = [LineFault(2.5, "9-39", 0.99), ClearFault(2.6), TripGenerator(2.66, "G03")]
    assert contingency_window(evs, 15.0) == (2.5, (2.5, 2.6))
    assert contingency_window([TripGenerator(1.0, "G03")], 5.0) == (1.0, None)
    assert contingency_window([BusFault(1.0, 3)], 5.0) == (1.0, (1.0, 5.0))
    assert contingency_window([], 5.0) == (0.0, None)


def test_post_contingency_network(ieee39):
    evs = [LineFault(2.5, "9-39", 0.5), ClearFault(2.6, trip_line=True), TripGenerator(2.66, "G03")]
    post = post_contingency_network(ieee39, evs)
    assert not any(m.id == "G03" and m.in_service for m in post.machines)
    assert not post.branch("9-39").in_service
    assert post_contingency_network(ieee39, [BusFault(1.0, 16), ClearFault(1.1)]) is ieee39


# --------------------------------------------------- bundled scenario pins

def test_step1_pins(step1_run):
    net1, rep = step1_run
    assert rep.n_iterations == 2
    assert rep.final_violations == 0
    support = {b: v for b, v in rep.dq_long.items() if v > 0}
    assert list(support) == [8]
    assert support[8] == pytest.approx(499.04, abs=0.01)
    assert rep.iterations[0]["installed"][0]["hour"] == 4601
    assert rep.critical_hours == [4601]


def test_step1_support_on_ranked_buses(step1_run):
    _, rep = step1_run
    ranked = {r["bus"] for it in rep.iterations for r in it["ranked"]}
    assert all(v >= 0 for v in rep.dq_long.values())
    assert {b for b, v in rep.dq_long.items() if v > 0} <= ranked


def test_step1_idempotent(step1_idem):
    _, rep = step1_idem
    assert rep.n_iterations == 1
    assert rep.total_mvar == 0.0


def test_step2_pins(step2_run):
    net2, rep = step2_run
    assert rep.runs_clean
    assert rep.n_iterations == 2
    assert {b: v for b, v in rep.dq_short.items() if v > 0} == {32: 86.0}
    assert rep.final_qds["violations"] == 0
    dyn = [c for c in net2.compensators if c.kind == DYNAMIC]
    assert [(c.bus, c.q_rating) for c in dyn] == [(32, 86.0)]
    last = rep.iterations[-1]["runs"]
    assert all(not r["violated_buses"] and r["completed"] for r in last)


def test_step2_mild(step2_mild):
    _, rep = step2_mild
    assert rep.n_iterations == 1
    assert all(v == 0.0 for v in rep.dq_short.values())


def test_step2_without_contingencies(step1_run, profiles):
    net1, rep1 = step1_run
    net2, rep = step2_short_term(net1, profiles, rep1, [], jobs=2)
    assert rep.total_mvar == 0.0
    assert rep.runs_clean
    assert rep.final_qds["violations"] == 0
    assert net2 is net1


def test_step2_requires_clean_step1(ieee39, profiles, step1_run):
    _, rep1 = step1_run
    from dataclasses import replace

    with pytest.raises(Exception, match="requires a successful step 1"):
        step2_short_term(ieee39, profiles, replace(rep1, final_violations=3), [])


def test_two_step_report(tmp_path):
    net = two_bus(X)
    prof = one_load_profiles([0.9, 1.2, 0.9], [0.1, 0.1, 0.1])
    _, rep = run_two_step(net, prof, [], out_dir=tmp_path, jobs=1)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["verified"] is True
    assert data["combined_ratings_mvar"] == {"2": int(np.ceil(rep.step1.dq_long[2]))}
    assert (tmp_path / "report.md").exists()
    assert (tmp_path / "step1" / "iter_01" / "violations.csv").exists()
    assert (tmp_path / "step1" / "iter_01" / "qv_curve_2_1.csv").exists()
    assert (tmp_path / "final" / "qds_voltages.csv").exists()
