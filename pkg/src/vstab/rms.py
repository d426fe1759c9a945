"""RMS (phasor) dynamic simulation.

Two-axis synchronous machines with a first-order AVR and a first-order droop
governor, constant-impedance loads, and voltage-regulating dynamic shunt
compensators.  Machine quantities are per-unit on each machine's own rating;
the network is per-unit on the system base.  The network is solved as a real
linear system in (Re V, Im V) with machine Norton equivalents folded in.

Time stepping is the partitioned trapezoidal rule: an explicit predictor
followed by two corrector passes, each pass re-solving the network.  The
compensator regulator is stiff at high gain, so its trapezoidal update is
solved implicitly together with the network.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import (DYNAMIC, STATIC, Compensator, DynamicModelParams, Network, NetworkError,
                       build_admittance, without_elements)
from .powerflow import Injections, PowerFlowOptions, PowerFlowSolution, solve_power_flow

FAULT_ADMITTANCE = -1e4j
COMP_DROOP = 0.02  # pu voltage for full rating
COMP_RESPONSE = 0.05  # s, used when a dynamic device has no response_time


class DynamicsError(ValueError):
    pass


# ------------------------------------------------------------------ events

@dataclass(frozen=True)
class BusFault:
    time: float
    bus: int
    admittance: complex = FAULT_ADMITTANCE


@dataclass(frozen=True)
class LineFault:
    """Fault at ``location`` (fraction of length from the from-bus) on a line."""

    time: float
    line: str
    location: float = 0.5
    admittance: complex = FAULT_ADMITTANCE


@dataclass(frozen=True)
class ClearFault:
    time: float
    trip_line: bool = False


@dataclass(frozen=True)
class TripGenerator:
    time: float
    machine: str


@dataclass(frozen=True)
class TripLine:
    time: float
    line: str


Event = BusFault | LineFault | ClearFault | TripGenerator | TripLine

_EVENT_KINDS = {"BusFault": BusFault, "LineFault": LineFault, "ClearFault": ClearFault,
                "TripGenerator": TripGenerator, "TripLine": TripLine}


def event_from_dict(d: dict) -> Event:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _EVENT_KINDS:
        raise DynamicsError(f"unknown event kind {kind!r}")
    if "admittance" in d:
        a = d["admittance"]
        d["admittance"] = complex(a[0], a[1]) if isinstance(a, (list, tuple)) else complex(a)
    try:
        return _EVENT_KINDS[kind](**d)
    except TypeError as exc:
        raise DynamicsError(f"{kind}: {exc}") from None


def event_to_dict(ev: Event) -> dict:
    d = {"kind": type(ev).__name__}
    for k, v in dataclasses.asdict(ev).items():
        d[k] = [v.real, v.imag] if isinstance(v, complex) else v
    return d


def dynamic_compensator(bus: int, q_rating: float, response_time: float = COMP_RESPONSE) -> Compensator:
    """A fast voltage-regulating shunt device (first-order lag, droop control)."""
    if response_time <= 0:
        raise NetworkError("response_time must be positive")
    return Compensator(bus=bus, q_rating=q_rating, kind=DYNAMIC, response_time=response_time)


# ------------------------------------------------------------------ state

@dataclass
class _Machines:
    ids: list[str]
    bus: np.ndarray  # bus index
    m: np.ndarray  # machine base / system base
    h: np.ndarray
    d: np.ndarray
    xd: np.ndarray
    xq: np.ndarray
    xdp: np.ndarray
    xqp: np.ndarray
    td0: np.ndarray
    tq0: np.ndarray
    ra: np.ndarray
    two_axis: np.ndarray
    has_avr: np.ndarray
    ka: np.ndarray
    ta: np.ndarray
    efd_min: np.ndarray
    efd_max: np.ndarray
    has_gov: np.ndarray
    r: np.ndarray
    tg: np.ndarray
    pmax: np.ndarray  # machine pu
    vref: np.ndarray = None
    pref: np.ndarray = None


@dataclass
class _Comps:
    bus: np.ndarray
    rating: np.ndarray  # system pu
    t: np.ndarray
    k: np.ndarray
    vref: np.ndarray = None


# state vector layout per machine: delta, dw, eq', ed', efd, pm
NX = 6
DELTA, DW, EQ, ED, EFD, PM = range(NX)
STATE_NAMES = ("delta", "omega_dev", "eq_p", "ed_p", "efd", "pm")


@dataclass
class DynamicState:
    net: Network
    bus_ids: list[int]
    y_lumped: np.ndarray  # per-bus constant admittance (loads, static devices), system pu
    mach: _Machines
    comps: _Comps
    x0: np.ndarray  # [machine x NX]
    q0: np.ndarray  # compensator outputs, system pu
    v0: np.ndarray  # complex bus voltages
    fixed_v: np.ndarray  # indices of buses held at v0 (infinite buses)
    omega_s: float

    def derivative_norm(self) -> float:
        """Largest state derivative at the stored initial point."""
        sim = _Simulator(self)
        return sim.max_derivative(self.x0, self.q0, self.v0)


def _params_for(net: Network, overrides: dict | None):
    out = []
    for mc in net.machines:
        if not mc.in_service:
            continue
        p = (overrides or {}).get(mc.id, mc.dynamic_params)
        if p is None:
            raise DynamicsError(f"machine {mc.id} has no dynamic parameters")
        out.append((mc, p))
    return out


def initialize_dynamics(net: Network, solution: PowerFlowSolution,
                        params: dict[str, DynamicModelParams] | None = None) -> DynamicState:
    """Back-solve machine states so that the power-flow point is an exact equilibrium.

    Constant loads become admittances.  At buses without machines the
    admittance absorbs the residual power-flow mismatch, so the network
    equations hold exactly at t = 0.
    """
    if not solution.converged:
        raise DynamicsError("cannot initialize from a non-converged power flow")
    if list(solution.bus_ids) != net.bus_ids:
        raise DynamicsError("solution does not belong to this network")
    n = net.n_bus
    idx = net.bus_index()
    base = net.mva_base
    V = np.asarray(solution.voltage, dtype=complex)
    Y = build_admittance(net).toarray()
    YV = Y @ V

    s_load = np.zeros(n, dtype=complex)
    for ld in net.loads:
        s_load[idx[ld.bus]] += complex(ld.p, ld.q) / base
    q_static = np.zeros(n)
    for c in net.compensators:
        if c.kind == STATIC:
            q_static[idx[c.bus]] += c.q_rating / base
    vm2 = np.abs(V) ** 2
    y_fixed = (np.conj(s_load) + 1j * q_static) / vm2

    pm = _params_for(net, params)
    mbus = np.array([idx[mc.bus] for mc, _ in pm], dtype=int)

    # dynamic compensators: initial output from the power flow (zero when not regulating)
    dyn = [c for c in net.compensators if c.kind == DYNAMIC]
    cbus = np.array([idx[c.bus] for c in dyn], dtype=int)
    q0 = np.zeros(len(dyn))
    for j, c in enumerate(dyn):
        k = idx[c.bus]
        if c.v_setpoint is not None and k not in set(mbus.tolist()) and solution.q_regulated is not None:
            q0[j] = np.clip(solution.q_regulated[k], 0.0, c.q_rating / base)
    i_comp = np.zeros(n, dtype=complex)
    for j, k in enumerate(cbus):
        i_comp[k] += -1j * q0[j] / np.abs(V[k]) * V[k] / np.abs(V[k])

    has_m = np.zeros(n, dtype=bool)
    has_m[mbus] = True
    slack = idx[net.slack_bus.id]
    fixed = [] if has_m[slack] else [slack]
    y_lumped = y_fixed.copy()
    for k in range(n):
        if not has_m[k] and k not in fixed:
            y_lumped[k] = (i_comp[k] - YV[k]) / V[k]

    # machine currents (system pu): whatever the network needs at machine buses
    i_bus = YV + y_lumped * V - i_comp
    currents = np.zeros(len(pm), dtype=complex)
    first = {}
    for j, (mc, _) in enumerate(pm):
        k = mbus[j]
        if k in first:
            s = complex(mc.p / base, solution.machine_q.get(mc.id, 0.0) / base)
            currents[j] = np.conj(s / V[k])
        else:
            first[k] = j
    for k, j in first.items():
        others = [jj for jj in range(len(pm)) if mbus[jj] == k and jj != j]
        currents[j] = i_bus[k] - currents[others].sum()

    def arr(f):
        return np.array([f(mc, p) for mc, p in pm], dtype=float)

    mach = _Machines(
        ids=[mc.id for mc, _ in pm], bus=mbus, m=arr(lambda mc, p: mc.mva_base / base),
        h=arr(lambda mc, p: p.h), d=arr(lambda mc, p: p.d), xd=arr(lambda mc, p: p.xd),
        xq=arr(lambda mc, p: p.xq), xdp=arr(lambda mc, p: p.xd_p),
        xqp=arr(lambda mc, p: p.xq_p if p.model == "two_axis" else p.xd_p),
        td0=arr(lambda mc, p: p.td0_p), tq0=arr(lambda mc, p: p.tq0_p), ra=arr(lambda mc, p: p.ra),
        two_axis=np.array([p.model == "two_axis" for _, p in pm], dtype=bool),
        has_avr=np.array([p.avr is not None for _, p in pm], dtype=bool),
        ka=arr(lambda mc, p: p.avr.ka if p.avr else 0.0), ta=arr(lambda mc, p: p.avr.ta if p.avr else 1.0),
        efd_min=arr(lambda mc, p: p.avr.efd_min if p.avr else -np.inf),
        efd_max=arr(lambda mc, p: p.avr.efd_max if p.avr else np.inf),
        has_gov=np.array([p.governor is not None for _, p in pm], dtype=bool),
        r=arr(lambda mc, p: p.governor.r if p.governor else 1.0),
        tg=arr(lambda mc, p: p.governor.tg if p.governor else 1.0),
        pmax=arr(lambda mc, p: p.governor.pmax / mc.mva_base if p.governor else np.inf),
    )

    x0 = np.zeros((len(pm), NX))
    for j, (mc, p) in enumerate(pm):
        k = mbus[j]
        I = currents[j] / mach.m[j]
        Vt = V[k]
        eq_axis = Vt + complex(mach.ra[j], mach.xqp[j] if p.model == "classical" else mach.xq[j]) * I
        delta = float(np.angle(eq_axis))
        rot = np.exp(-1j * (delta - np.pi / 2))
        vdq, idq = Vt * rot, I * rot
        vd, vq, id_, iq = vdq.real, vdq.imag, idq.real, idq.imag
        ed = vd + mach.ra[j] * id_ - mach.xqp[j] * iq
        eq = vq + mach.ra[j] * iq + mach.xdp[j] * id_
        if p.model == "classical":
            ed = 0.0 if abs(ed) < 1e-12 else ed
            efd = eq
        else:
            efd = eq + (mach.xd[j] - mach.xdp[j]) * id_
        pe = ed * id_ + eq * iq + (mach.xqp[j] - mach.xdp[j]) * id_ * iq
        if pe > mach.pmax[j] * (1 + 1e-9):
            raise DynamicsError(f"machine {mc.id}: loading {pe * mc.mva_base:.1f} MW exceeds Pmax "
                                f"{mach.pmax[j] * mc.mva_base:.1f} MW")
        if mach.has_avr[j] and not (mach.efd_min[j] - 1e-9 <= efd <= mach.efd_max[j] + 1e-9):
            raise DynamicsError(f"machine {mc.id}: field voltage {efd:.3f} pu outside AVR limits")
        x0[j] = (delta, 0.0, eq, ed, efd, pe)
    mach.vref = np.where(mach.has_avr, np.abs(V[mbus]) + x0[:, EFD] / np.where(mach.has_avr, mach.ka, 1.0), 0.0)
    mach.pref = x0[:, PM].copy()

    rating = np.array([c.q_rating / base for c in dyn])
    tc = np.array([c.response_time if c.response_time else COMP_RESPONSE for c in dyn])
    kc = rating / COMP_DROOP
    comps = _Comps(cbus, rating, tc, kc)
    comps.vref = np.abs(V[cbus]) + np.where(kc > 0, q0 / np.where(kc > 0, kc, 1.0), 0.0)

    state = DynamicState(net, net.bus_ids, y_lumped, mach, comps, x0, q0, V,
                         np.array(fixed, dtype=int), 2 * np.pi * net.f_hz)
    return state


# --------------------------------------------------------------- simulator

def _line_fault_block(br, alpha, y_fault):
    """2x2 admittance of a line with a shunt fault at fraction ``alpha``, fault node eliminated."""
    z = complex(br.r, br.x)
    y1, y2 = 1.0 / (alpha * z), 1.0 / ((1.0 - alpha) * z)
    b1, b2 = 0.5j * br.b_shunt * alpha, 0.5j * br.b_shunt * (1.0 - alpha)
    yff = y1 + y2 + b1 + b2 + y_fault
    ykk = y1 + b1 - y1 * y1 / yff
    ymm = y2 + b2 - y2 * y2 / yff
    ykm = -y1 * y2 / yff
    return ykk, ymm, ykm


class _Simulator:
    def __init__(self, st: DynamicState):
        self.st = st
        self.net = st.net
        self.idx = st.net.bus_index()
        self.n = st.net.n_bus
        self.online = np.ones(len(st.mach.ids), dtype=bool)
        self.tripped_lines: set[str] = set()
        self.faults: list[tuple] = []  # ("bus", k, y) | ("line", branch_id, alpha, y)
        self._rebuild()

    # -- network ----------------------------------------------------------
    def _rebuild(self):
        Y = self._branch_y()
        Y[np.diag_indices(self.n)] += self.st.y_lumped
        for f in self.faults:
            if f[0] == "bus":
                Y[f[1], f[1]] += f[2]
            else:
                br = self.net.branch(f[1])
                a, b = self.idx[br.from_bus], self.idx[br.to_bus]
                ys = 1.0 / complex(br.r, br.x)
                bc = 0.5j * br.b_shunt
                Y[a, a] -= ys + bc
                Y[b, b] -= ys + bc
                Y[a, b] += ys
                Y[b, a] += ys
                ykk, ymm, ykm = _line_fault_block(br, f[2], f[3])
                Y[a, a] += ykk
                Y[b, b] += ymm
                Y[a, b] += ykm
                Y[b, a] += ykm
        n2 = 2 * self.n
        A = np.zeros((n2, n2))
        G, B = Y.real, Y.imag
        A[0::2, 0::2] = G
        A[0::2, 1::2] = -B
        A[1::2, 0::2] = B
        A[1::2, 1::2] = G
        self.Ynet = A

    def _branch_y(self):
        n = self.n
        Y = np.zeros((n, n), dtype=complex)
        for br in self.net.branches:
            if not br.in_service or br.id in self.tripped_lines:
                continue
            f, t = self.idx[br.from_bus], self.idx[br.to_bus]
            ys = 1.0 / complex(br.r, br.x)
            bc = 0.5j * br.b_shunt
            a = br.tap
            Y[f, f] += (ys + bc) / (a * a)
            Y[t, t] += ys + bc
            Y[f, t] -= ys / a
            Y[t, f] -= ys / a
        g = np.array([complex(b.g_shunt, b.b_shunt) for b in self.net.buses]) / self.net.mva_base
        Y[np.diag_indices(n)] += g
        return Y

    def apply(self, ev) -> str:
        if isinstance(ev, BusFault):
            if ev.bus not in self.idx:
                raise DynamicsError(f"fault at unknown bus {ev.bus}")
            self.faults.append(("bus", self.idx[ev.bus], complex(ev.admittance)))
            return f"bus fault at {ev.bus}"
        if isinstance(ev, LineFault):
            br = self.net.branch(ev.line)
            if br.tap != 1.0:
                raise DynamicsError(f"line fault on transformer {br.id} is not supported")
            if br.id in self.tripped_lines or not br.in_service:
                raise DynamicsError(f"line {br.id} is out of service")
            if ev.location <= 0.0:
                self.faults.append(("bus", self.idx[br.from_bus], complex(ev.admittance)))
            elif ev.location >= 1.0:
                self.faults.append(("bus", self.idx[br.to_bus], complex(ev.admittance)))
            else:
                self.faults.append(("line", br.id, float(ev.location), complex(ev.admittance)))
            return f"fault on line {br.id} at {ev.location:g}"
        if isinstance(ev, ClearFault):
            if not self.faults:
                raise DynamicsError(f"ClearFault at t={ev.time} without an active fault")
            if ev.trip_line:
                for f in self.faults:
                    if f[0] == "line":
                        self.tripped_lines.add(f[1])
            self.faults = []
            return "fault cleared" + (" with line trip" if ev.trip_line else "")
        if isinstance(ev, TripGenerator):
            try:
                j = self.st.mach.ids.index(self.net.machine(ev.machine).id)
            except (NetworkError, ValueError):
                raise DynamicsError(f"unknown machine {ev.machine!r}") from None
            self.online[j] = False
            return f"generator {ev.machine} tripped"
        if isinstance(ev, TripLine):
            br = self.net.branch(ev.line)
            self.tripped_lines.add(br.id)
            return f"line {br.id} tripped"
        raise DynamicsError(f"unknown event {ev!r}")

    # -- machine algebra --------------------------------------------------
    def _blocks(self, x):
        """Per-machine rotation and Norton terms in network coordinates."""
        mc = self.st.mach
        d = x[:, DELTA]
        s, c = np.sin(d), np.cos(d)
        # Z = [[ra, -xq'], [xd', ra]], inverse
        det = mc.ra * mc.ra + mc.xdp * mc.xqp
        zi = np.empty((len(d), 2, 2))
        zi[:, 0, 0] = mc.ra / det
        zi[:, 0, 1] = mc.xqp / det
        zi[:, 1, 0] = -mc.xdp / det
        zi[:, 1, 1] = mc.ra / det
        R = np.empty((len(d), 2, 2))
        R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1] = s, c, -c, s
        RZ = np.einsum("mij,mjk->mik", R, zi)
        w = (mc.m * self.online)[:, None, None]
        K = w * np.einsum("mij,mkj->mik", RZ, R)  # m R Z^-1 R^T
        e = np.stack([x[:, ED], x[:, EQ]], axis=1)
        src = w[:, :, 0] * np.einsum("mij,mj->mi", RZ, e)
        return K, src

    def _assemble(self, x):
        A = self.Ynet.copy()
        rhs = np.zeros(2 * self.n)
        K, src = self._blocks(x)
        for j, k in enumerate(self.st.mach.bus):
            A[2 * k:2 * k + 2, 2 * k:2 * k + 2] += K[j]
            rhs[2 * k:2 * k + 2] += src[j]
        for k in self.st.fixed_v:
            A[2 * k:2 * k + 2, :] = 0.0
            A[2 * k, 2 * k] = A[2 * k + 1, 2 * k + 1] = 1.0
            rhs[2 * k], rhs[2 * k + 1] = self.st.v0[k].real, self.st.v0[k].imag
        return A, rhs

    def _comp_current(self, vr, vi, q_pred, gain, j):
        """Compensator current for the implicit trapezoidal regulator update."""
        cp = self.st.comps
        vm = np.hypot(vr, vi)
        q = np.clip((q_pred + gain * cp.k[j] * (cp.vref[j] - vm)) / (1.0 + gain), -cp.rating[j], cp.rating[j])
        if vm < 1e-9:
            return 0.0, 0.0, q
        a = np.clip(q / vm, -cp.rating[j], cp.rating[j])
        # I = -j a V/|V|
        return a * vi / vm, -a * vr / vm, q

    def solve_network(self, x, v_guess, q_prev=None, fq_prev=None, h=0.0):
        """Bus voltages for machine states ``x``; returns (V, q_comp) or raises."""
        A, rhs = self._assemble(x)
        cp = self.st.comps
        nc = len(cp.bus)
        if nc == 0:
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                raise DynamicsError("singular network matrix") from None
            return sol[0::2] + 1j * sol[1::2], np.zeros(0)
        if h > 0:
            gain = h / (2 * cp.t)
            q_pred = q_prev + gain * cp.t * fq_prev
        else:  # algebraic steady value at this instant (no integration)
            gain = np.zeros(nc)
            q_pred = q_prev.copy()
        z = np.empty(2 * self.n)
        z[0::2], z[1::2] = v_guess.real, v_guess.imag
        q = q_prev.copy()
        for _ in range(30):
            F = A @ z - rhs
            J = A.copy()
            for j, k in enumerate(cp.bus):
                vr, vi = z[2 * k], z[2 * k + 1]
                ir, ii, q[j] = self._comp_current(vr, vi, q_pred[j], gain[j], j)
                F[2 * k] -= ir
                F[2 * k + 1] -= ii
                eps = 1e-7
                for col, (dr, di) in enumerate(((eps, 0.0), (0.0, eps))):
                    jr, ji, _ = self._comp_current(vr + dr, vi + di, q_pred[j], gain[j], j)
                    J[2 * k, 2 * k + col] -= (jr - ir) / eps
                    J[2 * k + 1, 2 * k + col] -= (ji - ii) / eps
            if np.max(np.abs(F)) < 1e-11:
                break
            try:
                z = z - np.linalg.solve(J, F)
            except np.linalg.LinAlgError:
                raise DynamicsError("singular network matrix") from None
            if not np.all(np.isfinite(z)):
                raise DynamicsError("network solution diverged")
        else:
            raise DynamicsError("network solution did not converge")
        V = z[0::2] + 1j * z[1::2]
        for j, k in enumerate(cp.bus):
            q[j] = self._comp_current(V[k].real, V[k].imag, q_pred[j], gain[j], j)[2]
        return V, q

    # -- differential equations ---------------------------------------------
    def currents_dq(self, x, V):
        mc = self.st.mach
        Vt = V[mc.bus]
        rot = np.exp(-1j * (x[:, DELTA] - np.pi / 2))
        vdq = Vt * rot
        vd, vq = vdq.real, vdq.imag
        det = mc.ra * mc.ra + mc.xdp * mc.xqp
        a, b = x[:, ED] - vd, x[:, EQ] - vq
        id_ = (mc.ra * a + mc.xqp * b) / det
        iq = (-mc.xdp * a + mc.ra * b) / det
        return id_, iq, np.abs(Vt)

    def f(self, x, V):
        mc = self.st.mach
        id_, iq, vt = self.currents_dq(x, V)
        on = self.online
        pe = x[:, ED] * id_ + x[:, EQ] * iq + (mc.xqp - mc.xdp) * id_ * iq
        dx = np.zeros_like(x)
        dx[:, DELTA] = self.st.omega_s * x[:, DW]
        dx[:, DW] = (x[:, PM] - pe - mc.d * x[:, DW]) / (2 * mc.h)
        ta = mc.two_axis
        dx[:, EQ] = np.where(ta, (x[:, EFD] - x[:, EQ] - (mc.xd - mc.xdp) * id_) / mc.td0, 0.0)
        dx[:, ED] = np.where(ta, (-x[:, ED] + (mc.xq - mc.xqp) * iq) / mc.tq0, 0.0)
        defd = (mc.ka * (mc.vref - vt) - x[:, EFD]) / mc.ta
        defd = np.where((x[:, EFD] >= mc.efd_max) & (defd > 0), 0.0, defd)
        defd = np.where((x[:, EFD] <= mc.efd_min) & (defd < 0), 0.0, defd)
        dx[:, EFD] = np.where(mc.has_avr, defd, 0.0)
        dpm = (mc.pref - x[:, DW] / mc.r - x[:, PM]) / mc.tg
        dpm = np.where((x[:, PM] >= mc.pmax) & (dpm > 0), 0.0, dpm)
        dpm = np.where((x[:, PM] <= 0) & (dpm < 0), 0.0, dpm)
        dx[:, PM] = np.where(mc.has_gov, dpm, 0.0)
        dx[~on] = 0.0
        return dx

    def fq(self, q, V):
        cp = self.st.comps
        if len(cp.bus) == 0:
            return np.zeros(0)
        vm = np.abs(V[cp.bus])
        d = (-q + cp.k * (cp.vref - vm)) / cp.t
        d = np.where((q >= cp.rating) & (d > 0), 0.0, d)
        return np.where((q <= -cp.rating) & (d < 0), 0.0, d)

    def clip(self, x):
        mc = self.st.mach
        x[:, EFD] = np.where(mc.has_avr, np.clip(x[:, EFD], mc.efd_min, mc.efd_max), x[:, EFD])
        x[:, PM] = np.where(mc.has_gov, np.clip(x[:, PM], 0.0, mc.pmax), x[:, PM])
        return x

    def max_derivative(self, x, q, V, coi=True):
        dx = self.f(x, V)
        if coi and dx.shape[0]:
            mc = self.st.mach
            w = (mc.h * mc.m * self.online)
            if w.sum() > 0 and len(self.st.fixed_v) == 0:
                dx[:, DELTA] -= np.sum(w * dx[:, DELTA]) / w.sum()
        vals = [np.abs(dx[self.online]).ravel(), np.abs(self.fq(q, V))]
        allv = np.concatenate(vals) if any(v.size for v in vals) else np.zeros(1)
        return float(allv.max()) if allv.size else 0.0


# --------------------------------------------------------------- driver

@dataclass
class Trajectory:
    bus_ids: list[int]
    t: np.ndarray
    v_mag: np.ndarray  # [bus x sample]
    states: dict[str, np.ndarray]  # name -> [machine x sample]
    machine_ids: list[str]
    q_comp: np.ndarray  # [device x sample], Mvar
    comp_buses: list[int]
    events: list[tuple[float, str]] = field(default_factory=list)
    completed: bool = True
    message: str = ""
    final_max_derivative: float = float("nan")

    def v_at(self, bus_id: int) -> np.ndarray:
        return self.v_mag[self.bus_ids.index(bus_id)]

    def final_voltages(self) -> np.ndarray:
        return self.v_mag[:, -1]


def _check_events(events, t_end):
    evs = sorted(events, key=lambda e: e.time)
    for ev in evs:
        if not 0.0 < ev.time <= t_end:
            raise DynamicsError(f"event time {ev.time} outside (0, t_end]")
    return evs


def run_rms(state: DynamicState, events: list = (), t_end: float = 10.0, dt: float = 0.005) -> Trajectory:
    """Integrate from the initialized equilibrium to ``t_end``.

    Events land exactly on their time stamps (with a partial step when they
    fall between grid points); the sample stored at an event time is the
    post-event value.  A failed network solve ends the run early with
    ``completed=False``.
    """
    if dt <= 0 or t_end <= 0:
        raise DynamicsError("dt and t_end must be positive")
    evs = _check_events(events, t_end)
    sim = _Simulator(state)
    x = state.x0.copy()
    q = state.q0.copy()
    V = state.v0.copy()
    n_steps = int(round(t_end / dt))
    grid = [i * dt for i in range(n_steps + 1)]
    if grid[-1] < t_end - 1e-12:
        grid.append(t_end)
    ev_times = sorted({ev.time for ev in evs})
    times = sorted(set(grid) | {te for te in ev_times if not any(abs(te - g) < 1e-12 for g in grid)})

    ts, vs, xs, qs = [0.0], [np.abs(V)], [x.copy()], [q.copy()]
    log = []
    fx, fqv = sim.f(x, V), sim.fq(q, V)
    completed, message = True, ""
    ei = 0
    t = 0.0
    for t_next in times[1:]:
        h = t_next - t
        try:
            xp = sim.clip(x + h * fx)
            Vp, qp = sim.solve_network(xp, V, q, fqv, h)
            for _ in range(2):
                xc = sim.clip(x + 0.5 * h * (fx + sim.f(xp, Vp)))
                Vp, qp = sim.solve_network(xc, Vp, q, fqv, h)
                xp = xc
        except DynamicsError as exc:
            completed, message = False, f"t={t_next:.4f} s: {exc}"
            break
        x, V, q, t = xp, Vp, qp, t_next
        fx, fqv = sim.f(x, V), sim.fq(q, V)
        while ei < len(evs) and evs[ei].time <= t + 1e-12:
            log.append((evs[ei].time, sim.apply(evs[ei])))
            ei += 1
            sim._rebuild()
            try:
                V, q = sim.solve_network(x, V, q, None)
            except DynamicsError as exc:
                completed, message = False, f"t={t:.4f} s after event: {exc}"
                break
            fx, fqv = sim.f(x, V), sim.fq(q, V)
        if not completed:
            break
        ts.append(t)
        vs.append(np.abs(V))
        xs.append(x.copy())
        qs.append(q.copy())
    X = np.array(xs)  # [sample x machine x NX]
    states = {name: X[:, :, i].T.copy() for i, name in enumerate(STATE_NAMES)}
    Q = np.array(qs).T * state.net.mva_base if len(state.comps.bus) else np.zeros((0, len(ts)))
    traj = Trajectory(
        bus_ids=list(state.bus_ids), t=np.array(ts), v_mag=np.array(vs).T, states=states,
        machine_ids=list(state.mach.ids), q_comp=Q,
        comp_buses=[state.bus_ids[k] for k in state.comps.bus], events=log,
        completed=completed, message=message,
    )
    traj.final_max_derivative = sim.max_derivative(x, q, V) if completed else float("inf")
    return traj


def halve_step_check(state: DynamicState, events: list = (), t_end: float = 10.0, dt: float = 0.005) -> dict:
    """Rerun with dt/2 and compare bus voltages on the coarse grid."""
    a = run_rms(state, events, t_end, dt)
    b = run_rms(state, events, t_end, dt / 2)
    tb = {round(t, 9): i for i, t in enumerate(b.t)}
    cols = [(i, tb[round(t, 9)]) for i, t in enumerate(a.t) if round(t, 9) in tb]
    ia, ib = zip(*cols)
    dv = np.abs(a.v_mag[:, list(ia)] - b.v_mag[:, list(ib)])
    k = np.unravel_index(np.argmax(dv), dv.shape)
    return {"max_dv": float(dv.max()), "bus": a.bus_ids[k[0]], "t": float(a.t[ia[k[1]]]),
            "completed": a.completed and b.completed}


# ------------------------------------------------------- steady-state check

def post_event_power_flow(state: DynamicState, events: list, options: PowerFlowOptions | None = None,
                          max_outer: int = 50) -> PowerFlowSolution:
    """Algebraic equilibrium the RMS model should settle to after ``events``.

    Loads stay constant-admittance, tripped elements are removed and faults
    cleared.  Machine outputs follow governor droop at a common frequency
    deviation, and AVR setpoints include the proportional-control offset.
    """
    options = options or PowerFlowOptions(enforce_q_limits=False)
    net = state.net
    mc = state.mach
    base = net.mva_base
    trip_m = [ev.machine for ev in events if isinstance(ev, TripGenerator)]
    trip_m = [net.machine(k).id for k in trip_m]
    trip_b = [net.branch(ev.line).id for ev in events if isinstance(ev, TripLine)]
    for i, ev in enumerate(events):
        if isinstance(ev, ClearFault) and ev.trip_line:
            for prev in events[:i]:
                if isinstance(prev, LineFault) and 0 < prev.location < 1:
                    trip_b.append(net.branch(prev.line).id)
    post = without_elements(net, trip_m, trip_b)
    # loads and static devices as bus shunts (exactly the RMS admittances)
    buses = tuple(dataclasses.replace(b, g_shunt=b.g_shunt + state.y_lumped[k].real * base,
                                      b_shunt=b.b_shunt + state.y_lumped[k].imag * base)
                  for k, b in enumerate(post.buses))
    comps = tuple(c for c in post.compensators if c.kind == DYNAMIC)
    post = post.replace(buses=buses, loads=(), compensators=tuple(
        dataclasses.replace(c, v_setpoint=float(state.comps.vref[j])) for j, c in enumerate(comps)))
    on = np.array([mid not in trip_m for mid in mc.ids])
    inv_r = np.where(mc.has_gov, 1.0 / mc.r, 0.0) + mc.d
    slack_id = net.machine(net.slack_bus.id).id if any(m.bus == net.slack_bus.id for m in net.machines) else None
    dw = 0.0
    vset = {mid: abs(state.v0[mc.bus[j]]) for j, mid in enumerate(mc.ids)}
    sol = None
    for _ in range(max_outer):
        p = (mc.pref - dw * inv_r) * mc.m
        p = np.minimum(p, mc.pmax * mc.m)
        inj = Injections(machine_p={mid: p[j] * base for j, mid in enumerate(mc.ids) if on[j]},
                         machine_v={mid: vset[mid] for j, mid in enumerate(mc.ids) if on[j]})
        sol = solve_power_flow(post, inj, options)
        if not sol.converged:
            return sol
        changed = 0.0
        if slack_id is not None and inv_r[on].sum() > 0:
            js = mc.ids.index(slack_id)
            p_slack = sol.p_inj[net.bus_index()[net.slack_bus.id]]  # shunt loads sit inside Y
            ddw = (p[js] - p_slack) / float((inv_r * mc.m)[on].sum())
            dw += ddw
            changed = abs(ddw)
        st = _quiet_init(post, sol, state, on)
        for j, mid in enumerate(mc.ids):
            if on[j] and mc.has_avr[j]:
                new = mc.vref[j] - st[j] / mc.ka[j]
                changed = max(changed, abs(new - vset[mid]))
                vset[mid] = new
        if changed < 1e-11:
            break
    return sol


def _quiet_init(post, sol, state, on):
    """Field voltages of online machines at a power-flow point."""
    mc = state.mach
    V = sol.voltage
    idx = post.bus_index()
    out = np.zeros(len(mc.ids))
    Y = build_admittance(post).toarray()
    i_bus = Y @ V
    for j, mid in enumerate(mc.ids):
        if not on[j]:
            continue
        k = idx[state.bus_ids[mc.bus[j]]]
        # all machine current at a bus belongs to this machine (one machine per bus)
        I = i_bus[k] / mc.m[j]
        if len(state.comps.bus):
            for jj, kc in enumerate(state.comps.bus):
                if kc == k:
                    q = sol.q_regulated[k]
                    I -= (-1j * q / abs(V[k]) * V[k] / abs(V[k])) / mc.m[j]
        eq_axis = V[k] + complex(mc.ra[j], mc.xq[j] if mc.two_axis[j] else mc.xqp[j]) * I
        rot = np.exp(-1j * (np.angle(eq_axis) - np.pi / 2))
        idq = I * rot
        vq = (V[k] * rot).imag
        eq = vq + mc.ra[j] * idq.imag + mc.xdp[j] * idq.real
        out[j] = eq + (mc.xd[j] - mc.xdp[j]) * idq.real if mc.two_axis[j] else eq
    return out


# ------------------------------------------------------------------ I/O

def load_contingencies(path: str | Path) -> list[dict]:
    """Contingency file: JSON list of {"name": str, "events": [event, ...]}."""
    import json

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"contingency file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DynamicsError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise DynamicsError(f"{path}: expected a list of contingencies")
    out = []
    for i, item in enumerate(data):
        if "name" not in item or "events" not in item:
            raise DynamicsError(f"{path}: contingency {i} needs 'name' and 'events'")
        out.append({"name": str(item["name"]), "events": [event_from_dict(e) for e in item["events"]],
                    "t_end": float(item.get("t_end", 15.0))})
    return out


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s"] + [str(b) for b in traj.bus_ids])
        for i, t in enumerate(traj.t):
            w.writerow([format(t, ".10g")] + [format(v, ".10g") for v in traj.v_mag[:, i]])
