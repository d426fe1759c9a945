"""Regenerate src/vstab/data/ieee39.json.

Steady-state data: MATPOWER case39 (New England, 100 MVA base), with the two
loads MATPOWER added at buses 1 and 9 removed so the case has the 19 loads of
the original Athay/Pai description.  Machine dynamic data: Pai's tables (given
on the 100 MVA system base) converted to each machine's own base.  AVR and
governor values are generic textbook numbers, not taken from any publication
of this case.

Generator setpoints and reactive limits differ from MATPOWER; see SETPOINTS
and Q_MAX_FRAC below.

Usage: python tools/build_ieee39.py
"""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "vstab" / "data" / "ieee39.json"

# bus, Pd, Qd, baseKV
BUS_LOADS = {
    3: (322.0, 2.4), 4: (500.0, 184.0), 7: (233.8, 84.0), 8: (522.0, 176.6),
    12: (8.53, 88.0), 15: (320.0, 153.0), 16: (329.0, 32.3), 18: (158.0, 30.0),
    20: (680.0, 103.0), 21: (274.0, 115.0), 23: (247.5, 84.6), 24: (308.6, -92.2),
    25: (224.0, 47.2), 26: (139.0, 17.0), 27: (281.0, 75.5), 28: (206.0, 27.6),
    29: (283.5, 26.9), 31: (9.2, 4.6), 39: (1104.0, 250.0),
}

# from, to, r, x, b, rateA, tap (0 = line)
BRANCHES = [
    (1, 2, 0.0035, 0.0411, 0.6987, 600, 0), (1, 39, 0.001, 0.025, 0.75, 1000, 0),
    (2, 3, 0.0013, 0.0151, 0.2572, 500, 0), (2, 25, 0.007, 0.0086, 0.146, 500, 0),
    (2, 30, 0, 0.0181, 0, 900, 1.025), (3, 4, 0.0013, 0.0213, 0.2214, 500, 0),
    (3, 18, 0.0011, 0.0133, 0.2138, 500, 0), (4, 5, 0.0008, 0.0128, 0.1342, 600, 0),
    (4, 14, 0.0008, 0.0129, 0.1382, 500, 0), (5, 6, 0.0002, 0.0026, 0.0434, 1200, 0),
    (5, 8, 0.0008, 0.0112, 0.1476, 900, 0), (6, 7, 0.0006, 0.0092, 0.113, 900, 0),
    (6, 11, 0.0007, 0.0082, 0.1389, 480, 0), (6, 31, 0, 0.025, 0, 1800, 1.07),
    (7, 8, 0.0004, 0.0046, 0.078, 900, 0), (8, 9, 0.0023, 0.0363, 0.3804, 900, 0),
    (9, 39, 0.001, 0.025, 1.2, 900, 0), (10, 11, 0.0004, 0.0043, 0.0729, 600, 0),
    (10, 13, 0.0004, 0.0043, 0.0729, 600, 0), (10, 32, 0, 0.02, 0, 900, 1.07),
    (12, 11, 0.0016, 0.0435, 0, 500, 1.006), (12, 13, 0.0016, 0.0435, 0, 500, 1.006),
    (13, 14, 0.0009, 0.0101, 0.1723, 600, 0), (14, 15, 0.0018, 0.0217, 0.366, 600, 0),
    (15, 16, 0.0009, 0.0094, 0.171, 600, 0), (16, 17, 0.0007, 0.0089, 0.1342, 600, 0),
    (16, 19, 0.0016, 0.0195, 0.304, 600, 0), (16, 21, 0.0008, 0.0135, 0.2548, 600, 0),
    (16, 24, 0.0003, 0.0059, 0.068, 600, 0), (17, 18, 0.0007, 0.0082, 0.1319, 600, 0),
    (17, 27, 0.0013, 0.0173, 0.3216, 600, 0), (19, 20, 0.0007, 0.0138, 0, 900, 1.06),
    (19, 33, 0.0007, 0.0142, 0, 900, 1.07), (20, 34, 0.0009, 0.018, 0, 900, 1.009),
    (21, 22, 0.0008, 0.014, 0.2565, 900, 0), (22, 23, 0.0006, 0.0096, 0.1846, 600, 0),
    (22, 35, 0, 0.0143, 0, 900, 1.025), (23, 24, 0.0022, 0.035, 0.361, 600, 0),
    (23, 36, 0.0005, 0.0272, 0, 900, 1.0), (25, 26, 0.0032, 0.0323, 0.531, 600, 0),
    (25, 37, 0.0006, 0.0232, 0, 900, 1.025), (26, 27, 0.0014, 0.0147, 0.2396, 600, 0),
    (26, 28, 0.0043, 0.0474, 0.7802, 600, 0), (26, 29, 0.0057, 0.0625, 1.029, 600, 0),
    (28, 29, 0.0014, 0.0151, 0.249, 600, 0), (29, 38, 0.0008, 0.0156, 0, 1200, 1.025),
]

# name, bus, Pg, Qmax, Qmin, Vg (MATPOWER; Q limits and Vg are not used)
GENS = [
    ("G01", 39, 1000.0, 300, -100, 1.03), ("G02", 31, 677.871, 300, -100, 0.982),
    ("G03", 32, 650.0, 300, 150, 0.9841), ("G04", 33, 632.0, 250, 0, 0.9972),
    ("G05", 34, 508.0, 167, 0, 1.0123), ("G06", 35, 650.0, 300, -100, 1.0494),
    ("G07", 36, 560.0, 240, 0, 1.0636), ("G08", 37, 540.0, 250, 0, 1.0275),
    ("G09", 38, 830.0, 300, -150, 1.0265), ("G10", 30, 250.0, 400, 140, 1.0499),
]

# Pai, 100 MVA base: H, xd, xq, xd', xq', Td0', Tq0'
PAI = {
    39: (500.0, 0.02, 0.019, 0.006, 0.008, 7.0, 0.7),
    31: (30.3, 0.295, 0.282, 0.0697, 0.170, 6.56, 1.5),
    32: (35.8, 0.2495, 0.237, 0.0531, 0.0876, 5.7, 1.5),
    33: (28.6, 0.262, 0.258, 0.0436, 0.166, 5.69, 1.5),
    34: (26.0, 0.67, 0.62, 0.132, 0.166, 5.4, 0.44),
    35: (34.8, 0.254, 0.241, 0.05, 0.0814, 7.3, 0.4),
    36: (26.4, 0.295, 0.292, 0.049, 0.186, 5.66, 1.5),
    37: (24.3, 0.290, 0.280, 0.057, 0.0911, 6.7, 0.41),
    38: (34.5, 0.2106, 0.205, 0.057, 0.0587, 4.79, 1.96),
    30: (42.0, 0.1, 0.069, 0.031, 0.008, 10.2, 0.5),  # Tq0' not tabulated; 0.5 s assumed
}

# Nominal voltages only tell lines from transformers; they do not enter the pu data.
BASE_KV = {12: 138.0, 20: 230.0, **{b: 16.5 for b in range(30, 39)}}

# Machine rating used as per-unit base for its dynamic data.
RATING = {39: 10000.0}
DEFAULT_RATING = 1000.0

# Lowered from MATPOWER's solved-case values so that the whole year, including
# light-load hours after compensation, stays inside 0.95-1.05 pu.
SETPOINTS = {
    39: 0.99, 31: 0.96, 32: 0.96, 33: 0.99, 34: 1.0,
    35: 1.02, 36: 1.01, 37: 1.01, 38: 1.01, 30: 1.02,
}

# Reactive limits as fractions of machine rating.  MATPOWER's limits (some with
# positive Q minimums) make generator buses drop out of regulation in ordinary
# peak hours, which would put generator terminals on the violation list.
Q_MAX_FRAC, Q_MIN_FRAC = 0.6, -0.3
Q_FRAC_39 = (0.1, -0.05)  # bus 39 is an equivalent of the external system

AVR = {"ka": 30.0, "ta": 0.05, "efd_min": -5.0, "efd_max": 6.0}
GOV = {"r": 0.05, "tg": 0.5}
DAMPING = 20.0  # lumped damper-winding and PSS effect; the model has neither


def build() -> dict:
    gen_bus = {g[1]: g for g in GENS}
    buses = []
    for i in range(1, 40):
        kind = "Slack" if i == 31 else ("PV" if i in gen_bus else "PQ")
        buses.append({"id": i, "name": f"Bus {i:02d}", "base_kv": BASE_KV.get(i, 345.0), "kind": kind,
                      "v_setpoint": None, "g_shunt": 0.0, "b_shunt": 0.0})
    branches = []
    for f, t, r, x, b, rate, tap in BRANCHES:
        branches.append({"id": f"{f}-{t}", "from": f, "to": t, "r": r, "x": x, "b_shunt": b,
                         "tap": tap if tap else 1.0, "rating": float(rate), "in_service": True})
    loads = [{"id": f"L{bus:02d}", "bus": bus, "p": p, "q": q} for bus, (p, q) in BUS_LOADS.items()]
    machines = []
    for name, bus, pg, _qmax, _qmin, _vg in GENS:
        h, xd, xq, xdp, xqp, td0, tq0 = PAI[bus]
        s = RATING.get(bus, DEFAULT_RATING)
        k = s / 100.0
        dyn = {
            "h": round(h / k, 6), "d": DAMPING,
            "xd": round(xd * k, 6), "xq": round(xq * k, 6),
            "xd_p": round(xdp * k, 6), "xq_p": round(xqp * k, 6),
            "td0_p": td0, "tq0_p": tq0, "ra": 0.0, "model": "two_axis",
            "avr": dict(AVR), "governor": dict(GOV, pmax=1.0 * s),
        }
        qmax_f, qmin_f = Q_FRAC_39 if bus == 39 else (Q_MAX_FRAC, Q_MIN_FRAC)
        machines.append({"id": name, "bus": bus, "p": pg, "v_setpoint": SETPOINTS[bus],
                         "q_min": qmin_f * s, "q_max": qmax_f * s, "mva_base": s,
                         "in_service": True, "dynamic_params": dyn})
    return {"name": "IEEE 39-bus New England", "mva_base": 100.0, "f_hz": 60.0,
            "buses": buses, "branches": branches, "loads": loads, "machines": machines,
            "compensators": []}


if __name__ == "__main__":
    OUT.write_text(json.dumps(build(), indent=1) + "\n", encoding="utf-8")
    print(f"wrote {OUT}")
