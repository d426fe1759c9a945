"""Independent reference computations shared by the module tests and the acceptance suite."""

import numpy as np
from scipy.integrate import solve_ivp

from vstab.netmodel import build_admittance
from vstab.powerflow import state_layout

# two-bus Q-V case
P_QV, Q_QV, X_QV = 1.5, 0.3, 0.2

# single machine against an infinite bus (classical model)
H, XDP, XL, P = 5.0, 0.3, 0.3, 0.9
WS = 2 * np.pi * 60


def gauss_seidel(net, tol=1e-10, max_iter=100000, accel=1.6):
    """Independent accelerated Gauss-Seidel solver (no Q limits), dense, built from the raw data."""
    idx = net.bus_index()
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = 1 / complex(br.r, br.x)
        Y[f, f] += (y + 0.5j * br.b_shunt) / br.tap**2
        Y[t, t] += y + 0.5j * br.b_shunt
        Y[f, t] -= y / br.tap
        Y[t, f] -= y / br.tap
    for b in net.buses:
        Y[idx[b.id], idx[b.id]] += complex(b.g_shunt, b.b_shunt) / net.mva_base
    S = np.zeros(n, dtype=complex)
    for ld in net.loads:
        S[idx[ld.bus]] -= complex(ld.p, ld.q) / net.mva_base
    for c in net.compensators:
        S[idx[c.bus]] += 1j * c.q_rating / net.mva_base
    vset = {}
    for m in net.machines:
        if m.in_service:
            S[idx[m.bus]] += m.p / net.mva_base
            vset[idx[m.bus]] = m.v_setpoint
    slack = idx[net.slack_bus.id]
    V = np.ones(n, dtype=complex)
    for k, v in vset.items():
        V[k] = v
    for it in range(max_iter):
        dmax = 0.0
        for k in range(n):
            if k == slack:
                continue
            s = S[k]
            if k in vset:
                q = -np.imag(np.conj(V[k]) * (Y[k] @ V))
                s = complex(S[k].real, q)
            vk = (np.conj(s / V[k]) - (Y[k] @ V - Y[k, k] * V[k])) / Y[k, k]
            if k in vset:
                vk = vset[k] * vk / abs(vk)
            else:
                vk = V[k] + accel * (vk - V[k])
            dmax = max(dmax, abs(vk - V[k]))
            V[k] = vk
        if dmax < tol:
            return V, it
    raise RuntimeError("Gauss-Seidel did not converge")


def fd_jacobian(net, vm, va, h=1e-7):
    """Central differences of the injection equations, evaluated in extended precision.

    In float64 the rounding error of a 1e-7 step on 39-bus injections (entries
    of order 1e3) is itself about 1e-6, so the oracle runs in long double.
    """
    pvpq, pq = state_layout(net)
    Y = build_admittance(net).toarray().astype(np.clongdouble)
    vm = vm.astype(np.longdouble)
    va = va.astype(np.longdouble)

    def calc(m, a):
        V = m * (np.cos(a) + 1j * np.sin(a))
        S = V * np.conj(Y @ V)
        return np.concatenate([S.real[pvpq], S.imag[pq]])

    x0 = np.concatenate([va[pvpq], vm[pq]])
    cols = []
    for j in range(x0.size):
        out = []
        for s in (1, -1):
            x = x0.copy()
            x[j] += s * np.longdouble(h)
            a, m = va.copy(), vm.copy()
            a[pvpq] = x[:pvpq.size]
            m[pq] = x[pvpq.size:]
            out.append(calc(m, a))
        cols.append((out[0] - out[1]) / (2 * np.longdouble(h)))
    return np.array(cols, dtype=np.float64).T


def analytic_q(v, p=P_QV, q=Q_QV, x=X_QV):
    """Source injection (Mvar on 100 MVA) holding the load bus of the two-bus system at v."""
    return 100.0 * (q + (v * v - np.sqrt(v * v - (p * x) ** 2)) / x)


def qv_nose(p=P_QV, x=X_QV):
    return float(np.sqrt(0.25 + (p * x) ** 2))


def smib_dict(p=P, governor=None):
    params = {"h": H, "d": 0.0, "xd_p": XDP, "model": "classical"}
    if governor:
        params["governor"] = governor
    return {
        "mva_base": 100.0, "f_hz": 60.0,
        "buses": [{"id": 1, "base_kv": 20.0, "kind": "PV"},
                  {"id": 2, "base_kv": 20.0, "kind": "Slack", "v_setpoint": 1.0}],
        "branches": [{"id": "1-2", "from": 1, "to": 2, "r": 0.0, "x": XL}],
        "loads": [],
        "machines": [{"id": "G", "bus": 1, "p": p * 100.0, "v_setpoint": 1.0, "mva_base": 100.0,
                      "dynamic_params": params}],
    }


def smib_emf(sol):
    v1 = sol.voltage[0]
    i = np.conj(complex(P, sol.q_inj[0]) / v1)
    e = v1 + 1j * XDP * i
    return abs(e), float(np.angle(e) - np.angle(sol.voltage[1]))


def equal_area_cct(sol):
    """Critical clearing time from the equal-area angle and the fault-on swing."""
    em, d0 = smib_emf(sol)
    y1, y2, yf = 1 / (1j * XDP), 1 / (1j * XL), -1e4j
    p_fault = em * abs(-y1 * y2 / (y1 + y2 + yf))
    p_post = em / (XDP + XL)
    dmax = np.pi - np.arcsin(P / p_post)
    cos_dc = (P * (dmax - d0) + p_post * np.cos(dmax) - p_fault * np.cos(d0)) / (p_post - p_fault)
    dc = np.arccos(cos_dc)

    def hit(t, y):
        return y[0] - dc

    hit.terminal = True
    r = solve_ivp(lambda t, y: [WS * y[1], (P - p_fault * np.sin(y[0])) / (2 * H)], (0, 2), [d0, 0.0],
                  events=hit, rtol=1e-12, atol=1e-12)
    return float(r.t_events[0][0])


