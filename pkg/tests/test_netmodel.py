import json

import numpy as np
import pytest

from vstab.netmodel import (Compensator, NetworkError, _two_bus_dict, apply_compensation, build_admittance,
                            compensation_vector, from_pu, load_network, network_from_dict, save_network,
                            to_pu, without_elements)

from conftest import two_bus


def test_ieee39_counts(ieee39):
    assert ieee39.n_bus == 39
    assert len(ieee39.machines) == 10
    assert len(ieee39.loads) == 19
    assert len(ieee39.lines()) == 34
    assert ieee39.slack_bus.id == 31


def test_two_bus_file(tmp_path):
    p = tmp_path / "two.json"
    p.write_text(json.dumps(_two_bus_dict(0.1, 0.5, 0.2)))
    net = load_network(p)
    assert net.n_bus == 2


def test_roundtrip(tmp_path, ieee39):
    p = tmp_path / "n.json"
    save_network(ieee39, p)
    assert load_network(p).digest() == ieee39.digest()


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["buses"][1].update(kind="Slack", v_setpoint=1.0), "multiple slack buses"),
    (lambda d: d["buses"][0].update(kind="PQ"), "no slack bus"),
    (lambda d: d["buses"].append(dict(d["buses"][1])), "duplicate bus"),
    (lambda d: d["buses"].append({"id": 3, "base_kv": 345.0, "kind": "PQ"}), "disconnected"),
    (lambda d: d["branches"][0].pop("x"), "missing field 'x'"),
    (lambda d: d["loads"][0].update(bus=7), "unknown bus"),
    (lambda d: d.update(extra=1), "unknown top-level"),
])
def test_validation_errors(mutate, msg):
    d = _two_bus_dict(0.1, 0.5, 0.2)
    mutate(d)
    with pytest.raises(NetworkError, match=msg):
        network_from_dict(d)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_network(tmp_path / "nope.json")


def test_admittance_two_bus():
    Y = build_admittance(two_bus(0.1)).toarray()
    assert np.allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)
    d = _two_bus_dict(0.1)
    d["buses"][1]["b_shunt"] = 5.0  # Mvar at 1 pu on 100 MVA = 0.05 pu
    Y2 = build_admittance(network_from_dict(d)).toarray()
    assert Y2[1, 1] - Y[1, 1] == pytest.approx(0.05j, abs=1e-15)


def test_admittance_ieee39_dense_oracle(ieee39):
    Y = build_admittance(ieee39).toarray()
    idx = ieee39.bus_index()
    ref = np.zeros_like(Y)
    for br in ieee39.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = 1 / (br.r + 1j * br.x)
        a = br.tap
        ref[f, f] += (y + 0.5j * br.b_shunt) / a**2
        ref[t, t] += y + 0.5j * br.b_shunt
        ref[f, t] -= y / a
        ref[t, f] -= y / a
    for b in ieee39.buses:
        ref[idx[b.id], idx[b.id]] += (b.g_shunt + 1j * b.b_shunt) / ieee39.mva_base
    assert np.abs(Y - ref).max() < 1e-12
    assert np.abs(Y - Y.T).max() < 1e-12


def test_admittance_symmetric_and_row_sums_without_taps(ieee39):
    flat = ieee39.replace(branches=tuple(b.__class__(**{**b.__dict__, "tap": 1.0}) for b in ieee39.branches))
    Y = build_admittance(flat).toarray()
    assert np.abs(Y - Y.T).max() < 1e-12
    idx = flat.bus_index()
    shunt = np.zeros(flat.n_bus, dtype=complex)
    for br in flat.branches:
        shunt[idx[br.from_bus]] += 0.5j * br.b_shunt
        shunt[idx[br.to_bus]] += 0.5j * br.b_shunt
    assert np.abs(Y.sum(axis=1) - shunt).max() < 1e-9


def test_per_unit_roundtrip():
    x = np.array([0.0, 1.5, 1234.5678, -77.0])
    assert np.allclose(from_pu(to_pu(x, 100.0), 100.0), x, rtol=1e-12, atol=0)


def test_apply_compensation(ieee39):
    n1 = apply_compensation(ieee39, Compensator(4, 916.0))
    assert len(n1.compensators) == 1 and n1.compensators[0].q_rating == 916.0
    assert ieee39.compensators == ()
    n2 = apply_compensation(apply_compensation(ieee39, Compensator(7, 100.0)), Compensator(7, 50.0))
    assert [(c.bus, c.q_rating) for c in n2.compensators] == [(7, 150.0)]
    assert compensation_vector(n2)[7] == 150.0
    with pytest.raises(NetworkError):
        apply_compensation(ieee39, Compensator(99, 1.0))
    with pytest.raises(NetworkError):
        Compensator(4, -1.0)


def test_without_elements(ieee39):
    n = without_elements(ieee39, ["G03"], ["9-39"])
    assert not n.machine("G03").in_service
    assert not n.branch("9-39").in_service
    assert next(b for b in n.buses if b.id == 32).kind == "PQ"
    with pytest.raises(NetworkError, match="slack"):
        without_elements(ieee39, ["G02"])
