import numpy as np
import pytest

from vstab.metrics import count_violations
from vstab.qds import load_profiles, run_qds, save_profiles
from vstab.synth import SynthConfig, stress_window, synth_profiles


def test_first_hour_is_base_case(ieee39):
    p = synth_profiles(ieee39, seed=3, horizon=1)
    assert np.array_equal(p.load_p[:, 0], [ld.p for ld in ieee39.loads])
    assert np.array_equal(p.load_q[:, 0], [ld.q for ld in ieee39.loads])
    ms = [m for m in ieee39.machines if m.in_service]
    assert np.array_equal(p.machine_p[:, 0], [m.p for m in ms])


def test_same_seed_same_file(ieee39, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    save_profiles(synth_profiles(ieee39, seed=11, horizon=200), a)
    save_profiles(synth_profiles(ieee39, seed=11, horizon=200), b)
    assert a.read_bytes() == b.read_bytes()
    save_profiles(synth_profiles(ieee39, seed=12, horizon=200), b)
    assert a.read_bytes() != b.read_bytes()


def test_round_trip(ieee39, tmp_path):
    p = synth_profiles(ieee39, seed=5, horizon=48)
    save_profiles(p, tmp_path / "p.csv")
    q = load_profiles(tmp_path / "p.csv", ieee39)
    for name in ("load_p", "load_q", "machine_p", "machine_v"):
        a, b = getattr(p, name), getattr(q, name)
        assert np.all(np.abs(a - b) <= 1e-9 * np.maximum(np.abs(a), 1e-300))


def test_stress_window_truncated():
    w = stress_window(8760, SynthConfig())
    assert w[0] == 0.0 and w[-1] == 0.0
    assert w.argmax() == 4632 and w.max() == 1.0


def test_unstressed_year_is_clean(ieee39):
    p = synth_profiles(ieee39, seed=7, cfg=SynthConfig(stress=0.0))
    s = run_qds(ieee39, p, jobs=2)
    assert s.converged.all()
    assert count_violations(s) == 0


def test_bad_horizon(ieee39):
    with pytest.raises(ValueError):
        synth_profiles(ieee39, horizon=0)
