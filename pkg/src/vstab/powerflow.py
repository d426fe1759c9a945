"""Polar Newton-Raphson AC power flow with generator Q-limit switching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .netmodel import DYNAMIC, PQ, PV, SLACK, STATIC, Network, NetworkError, build_admittance


@dataclass(frozen=True)
class PowerFlowOptions:
    tol: float = 1e-8
    max_iter: int = 30
    enforce_q_limits: bool = True
    flat_start: bool = True
    max_q_passes: int = 5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class Injections:
    """Per-element overrides in engineering units (MW, Mvar, pu voltage).

    ``bus_p``/``bus_q`` are additional injections (positive = into the bus).
    """

    load_p: dict[str, float] = field(default_factory=dict)
    load_q: dict[str, float] = field(default_factory=dict)
    machine_p: dict[str, float] = field(default_factory=dict)
    machine_v: dict[str, float] = field(default_factory=dict)
    bus_p: dict[int, float] = field(default_factory=dict)
    bus_q: dict[int, float] = field(default_factory=dict)


@dataclass
class PowerFlowSolution:
    bus_ids: list[int]
    v_mag: np.ndarray
    v_ang: np.ndarray  # radians
    p_inj: np.ndarray  # pu, net injection computed from V
    q_inj: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    q_regulated: np.ndarray = None  # pu, reactive output of voltage-holding sources per bus
    machine_q: dict[str, float] = field(default_factory=dict)  # Mvar
    bus_kind: list[str] = field(default_factory=list)
    message: str = ""

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def v_at(self, bus_id: int) -> float:
        return float(self.v_mag[self.bus_ids.index(bus_id)])


class SingularJacobian(RuntimeError):
    def __init__(self, bus_id):
        super().__init__(f"singular Jacobian (pivot at bus {bus_id})")
        self.bus_id = bus_id


# --------------------------------------------------------------------- kernel

def power_injection(Y: np.ndarray, V: np.ndarray) -> np.ndarray:
    return V * np.conj(Y @ V)


def _dS(Y: np.ndarray, V: np.ndarray):
    """Partial derivatives of complex bus injections w.r.t. |V| and angle."""
    Ibus = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :])
    dS_dVm[np.diag_indices_from(dS_dVm)] += np.conj(Ibus) * Vnorm
    dS_dVa = -1j * V[:, None] * np.conj(Y * V[None, :])
    dS_dVa[np.diag_indices_from(dS_dVa)] += 1j * V * np.conj(Ibus)
    return dS_dVm, dS_dVa


def _jac(Y, V, pvpq, pq):
    dS_dVm, dS_dVa = _dS(Y, V)
    j11 = dS_dVa[np.ix_(pvpq, pvpq)].real
    j12 = dS_dVm[np.ix_(pvpq, pq)].real
    j21 = dS_dVa[np.ix_(pq, pvpq)].imag
    j22 = dS_dVm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def _mis(Y, V, Sbus, pvpq, pq):
    m = power_injection(Y, V) - Sbus
    return np.concatenate([m[pvpq].real, m[pq].imag])


def newton(Y, Sbus, V0, pvpq, pq, tol=1e-8, max_iter=30):
    """Plain Newton iteration.  Returns (V, converged, iterations, max_mismatch).

    Once the mismatch is below ``tol`` one further correction is applied, so
    results from different starting points agree far below ``tol``.
    Raises :class:`SingularJacobian` carrying the bus *index* of the
    smallest pivot.
    """
    V = V0.copy()
    Va, Vm = np.angle(V), np.abs(V)
    npvpq = len(pvpq)
    F = _mis(Y, V, Sbus, pvpq, pq)
    err = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    polished = False
    while True:
        if not np.isfinite(err):
            return V, False, it, float("inf")
        if err <= tol:
            if polished or F.size == 0:
                return V, True, it, err
            polished = True
        elif it >= max_iter:
            return V, False, it, err
        J = _jac(Y, V, pvpq, pq)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise SingularJacobian(_pivot_bus(J, pvpq, pq)) from None
        Va[pvpq] += dx[:npvpq]
        Vm[pq] += dx[npvpq:]
        V = Vm * np.exp(1j * Va)
        F = _mis(Y, V, Sbus, pvpq, pq)
        err = np.max(np.abs(F))
        it += 1


def _pivot_bus(J, pvpq, pq):
    _, _, U = scipy.linalg.lu(J)
    k = int(np.argmin(np.abs(np.diag(U))))
    cols = list(pvpq) + list(pq)
    return cols[k]


# ---------------------------------------------------------------- compiled case

class PreparedCase:
    """Array form of a network for repeated power-flow solves.

    Built once per network; hourly sweeps only swap the injection vectors.
    """

    def __init__(self, net: Network):
        self.net = net
        self.base = net.mva_base
        self.bus_ids = net.bus_ids
        self.n = net.n_bus
        idx = net.bus_index()
        self.idx = idx
        self.Y = build_admittance(net).toarray()
        self.slack = idx[net.slack_bus.id]

        self.load_ids = [ld.id for ld in net.loads]
        self.load_bus = np.array([idx[ld.bus] for ld in net.loads], dtype=int)
        self.load_p = np.array([ld.p for ld in net.loads]) / self.base
        self.load_q = np.array([ld.q for ld in net.loads]) / self.base

        ms = [m for m in net.machines if m.in_service]
        self.machines = ms
        self.mach_ids = [m.id for m in ms]
        self.mach_bus = np.array([idx[m.bus] for m in ms], dtype=int)
        self.mach_p = np.array([m.p for m in ms]) / self.base
        self.mach_v = np.array([m.v_setpoint for m in ms], dtype=float)
        self.mach_qmin = np.array([m.q_min for m in ms]) / self.base
        self.mach_qmax = np.array([m.q_max for m in ms]) / self.base

        self.static_q = np.zeros(self.n)
        for c in net.compensators:
            if c.kind == STATIC:
                self.static_q[idx[c.bus]] += c.q_rating / self.base
        # voltage-holding dynamic devices: injection-only regulators
        self.reg_dyn = [(idx[c.bus], c.q_rating / self.base, c.v_setpoint)
                        for c in net.compensators if c.kind == DYNAMIC and c.v_setpoint is not None]

        pv = []
        self.bus_vset = np.ones(self.n)
        for b in net.buses:
            k = idx[b.id]
            if b.v_setpoint is not None:
                self.bus_vset[k] = b.v_setpoint
            if b.kind == PV and k != self.slack:
                pv.append(k)
        regulated = set(pv) | {k for k, _, _ in self.reg_dyn}
        self.pv0 = np.array(sorted(regulated - {self.slack}), dtype=int)
        # bus setpoint priority: machine > dynamic device > bus field
        self.vset_from_machine = {}
        for j, m in enumerate(ms):
            self.vset_from_machine.setdefault(self.mach_bus[j], j)

        self.qmin_bus = np.zeros(self.n)
        self.qmax_bus = np.zeros(self.n)
        self.has_limits = np.zeros(self.n, dtype=bool)
        np.add.at(self.qmin_bus, self.mach_bus, self.mach_qmin)
        np.add.at(self.qmax_bus, self.mach_bus, self.mach_qmax)
        self.has_limits[self.mach_bus] = True
        for k, q, _ in self.reg_dyn:
            self.qmax_bus[k] += q
            self.has_limits[k] = True
        # a PV bus with only a bus-level setpoint has no limits

    # -- injections ------------------------------------------------------
    def vectors(self, inj: Injections | None):
        """Return (load_p, load_q, mach_p, mach_v, extra) arrays in pu."""
        lp, lq = self.load_p.copy(), self.load_q.copy()
        mp, mv = self.mach_p.copy(), self.mach_v.copy()
        extra = np.zeros(self.n, dtype=complex)
        if inj is not None:
            for key, val in inj.load_p.items():
                lp[self._pos(self.load_ids, key, "load")] = val / self.base
            for key, val in inj.load_q.items():
                lq[self._pos(self.load_ids, key, "load")] = val / self.base
            for key, val in inj.machine_p.items():
                mp[self._pos(self.mach_ids, key, "machine")] = val / self.base
            for key, val in inj.machine_v.items():
                mv[self._pos(self.mach_ids, key, "machine")] = val
            for b, val in inj.bus_p.items():
                extra[self._bus(b)] += val / self.base
            for b, val in inj.bus_q.items():
                extra[self._bus(b)] += 1j * val / self.base
        return lp, lq, mp, mv, extra

    def _pos(self, ids, key, what):
        try:
            return ids.index(str(key))
        except ValueError:
            raise NetworkError(f"unknown {what} id {key!r}") from None

    def _bus(self, b):
        if b not in self.idx:
            raise NetworkError(f"unknown bus {b}")
        return self.idx[b]

    def fixed_injection(self, lp, lq, mp, extra) -> np.ndarray:
        s = extra.copy()
        np.add.at(s, self.load_bus, -(lp + 1j * lq))
        np.add.at(s, self.mach_bus, mp)
        s += 1j * self.static_q
        return s

    def setpoints(self, mv) -> np.ndarray:
        vset = self.bus_vset.copy()
        for k, _, v in self.reg_dyn:
            vset[k] = v
        for k, j in self.vset_from_machine.items():
            vset[k] = mv[j]
        return vset

    # -- solve -----------------------------------------------------------
    def solve(self, sfix, vset, options: PowerFlowOptions, v0=None, hold=None):
        """Solve with Q-limit switching.

        ``hold`` = (bus index, voltage) pins one bus as an unlimited
        voltage source (used for Q-V tracing).
        """
        n = self.n
        pv = set(self.pv0.tolist())
        vset = vset.copy()
        unlimited = set()
        if hold is not None:
            k, vh = hold
            if k == self.slack:
                raise NetworkError("cannot hold the slack bus voltage")
            pv.add(k)
            vset[k] = vh
            unlimited.add(k)
        if v0 is None or options.flat_start:
            V = np.ones(n, dtype=complex)
        else:
            V = np.asarray(v0, dtype=complex).copy()
        regmask = np.zeros(n, dtype=bool)
        regmask[list(pv) + [self.slack]] = True
        V[regmask] = vset[regmask] * np.exp(1j * np.angle(V[regmask]))

        fixed_at = {}  # bus -> 'max' | 'min'
        switched_back = set()
        total_it = 0
        S = sfix.copy()
        for _ in range(max(1, options.max_q_passes)):
            pv_arr = np.array(sorted(pv - set(fixed_at)), dtype=int)
            pq_arr = np.array(sorted(set(range(n)) - set(pv_arr.tolist()) - {self.slack}), dtype=int)
            pvpq = np.concatenate([pv_arr, pq_arr]).astype(int)
            Sb = S.copy()
            for k, side in fixed_at.items():
                Sb[k] += 1j * (self.qmax_bus[k] if side == "max" else self.qmin_bus[k])
            try:
                V, ok, it, err = newton(self.Y, Sb, V, pvpq, pq_arr, options.tol, options.max_iter)
            except SingularJacobian as exc:
                sol = self._solution(V, sfix, fixed_at, False, total_it, float("inf"), pv, unlimited)
                sol.message = f"singular Jacobian (pivot at bus {self.bus_ids[exc.bus_id]})"
                return sol
            total_it += it
            if not ok:
                sol = self._solution(V, sfix, fixed_at, False, total_it, err, pv, unlimited)
                sol.message = f"no convergence after {total_it} iterations (mismatch {err:.3g})"
                return sol
            if not options.enforce_q_limits:
                return self._solution(V, sfix, fixed_at, True, total_it, err, pv, unlimited)
            qreg = power_injection(self.Y, V).imag - sfix.imag
            changed = False
            for k in pv_arr:
                if k in unlimited or not self.has_limits[k]:
                    continue
                if qreg[k] > self.qmax_bus[k] + options.tol:
                    fixed_at[k] = "max"
                    changed = True
                elif qreg[k] < self.qmin_bus[k] - options.tol:
                    fixed_at[k] = "min"
                    changed = True
            for k, side in list(fixed_at.items()):
                if k in switched_back:
                    continue
                vm = abs(V[k])
                if (side == "max" and vm > vset[k] + options.tol) or (side == "min" and vm < vset[k] - options.tol):
                    del fixed_at[k]
                    switched_back.add(k)
                    V[k] = vset[k] * np.exp(1j * np.angle(V[k]))
                    changed = True
            if not changed:
                return self._solution(V, sfix, fixed_at, True, total_it, err, pv, unlimited)
        sol = self._solution(V, sfix, fixed_at, False, total_it, err, pv, unlimited)
        sol.message = "reactive limit switching did not settle"
        return sol

    def _solution(self, V, sfix, fixed_at, ok, it, err, pv, unlimited):
        S = power_injection(self.Y, V)
        qreg = S.imag - sfix.imag
        qreg_out = np.zeros(self.n)
        reg_buses = sorted(pv | {self.slack})
        qreg_out[reg_buses] = qreg[reg_buses]
        kinds = []
        for k in range(self.n):
            if k == self.slack:
                kinds.append(SLACK)
            elif k in pv and k not in fixed_at:
                kinds.append(PV)
            else:
                kinds.append(PQ)
        mq = {}
        for j, mid in enumerate(self.mach_ids):
            k = self.mach_bus[j]
            mq[mid] = self._share(k, j, qreg_out[k], fixed_at.get(k), k in unlimited) * self.base
        return PowerFlowSolution(
            bus_ids=list(self.bus_ids), v_mag=np.abs(V), v_ang=np.angle(V), p_inj=S.real, q_inj=S.imag,
            converged=ok, iterations=it, max_mismatch=float(err), q_regulated=qreg_out,
            machine_q=mq, bus_kind=kinds,
        )

    def _share(self, k, j, qbus, side, held):
        if held:
            return 0.0
        on_bus = np.flatnonzero(self.mach_bus == k)
        if side == "max":
            return self.mach_qmax[j]
        if side == "min":
            return self.mach_qmin[j]
        dyn_min = 0.0
        dyn_rng = sum(q for kk, q, _ in self.reg_dyn if kk == k)
        lo = self.mach_qmin[on_bus].sum() + dyn_min
        rng = (self.mach_qmax[on_bus] - self.mach_qmin[on_bus]).sum() + dyn_rng
        if k == self.slack or rng <= 0:
            return qbus / max(len(on_bus), 1)
        frac = (qbus - lo) / rng
        return self.mach_qmin[j] + frac * (self.mach_qmax[j] - self.mach_qmin[j])


# ------------------------------------------------------------------ public API

def solve_power_flow(net: Network, injections: Injections | None = None,
                     options: PowerFlowOptions | None = None, *, v0=None,
                     hold: tuple[int, float] | None = None,
                     case: PreparedCase | None = None) -> PowerFlowSolution:
    """Solve the AC power flow of ``net`` with optional per-element overrides.

    Non-convergence is reported through ``converged``/``message`` rather than
    raised.  ``v0`` (a previous solution or complex voltage vector) is used as
    the starting point when ``options.flat_start`` is False.  ``hold`` pins
    bus ``hold[0]`` (bus id) at voltage ``hold[1]`` with unlimited reactive
    support.
    """
    options = options or PowerFlowOptions()
    case = case or PreparedCase(net)
    lp, lq, mp, mv, extra = case.vectors(injections)
    sfix = case.fixed_injection(lp, lq, mp, extra)
    vset = case.setpoints(mv)
    if isinstance(v0, PowerFlowSolution):
        v0 = v0.voltage
    h = None
    if hold is not None:
        h = (case._bus(hold[0]), float(hold[1]))
    return case.solve(sfix, vset, options, v0=v0, hold=h)


def _state_setup(net: Network, injections: Injections | None):
    case = PreparedCase(net)
    lp, lq, mp, mv, extra = case.vectors(injections)
    sfix = case.fixed_injection(lp, lq, mp, extra)
    pv = case.pv0
    pq = np.array(sorted(set(range(case.n)) - set(pv.tolist()) - {case.slack}), dtype=int)
    pvpq = np.concatenate([pv, pq]).astype(int)
    return case, sfix, pvpq, pq


def mismatch(net: Network, v_mag, v_ang, injections: Injections | None = None) -> np.ndarray:
    """Mismatch vector [dP(non-slack), dQ(PQ buses)] in pu, base bus types."""
    case, sfix, pvpq, pq = _state_setup(net, injections)
    V = np.asarray(v_mag) * np.exp(1j * np.asarray(v_ang))
    return _mis(case.Y, V, sfix, pvpq, pq)


def jacobian(net: Network, v_mag, v_ang, injections: Injections | None = None) -> np.ndarray:
    """Analytic power-flow Jacobian at the given state (base bus types).

    Columns: angles of non-slack buses, then magnitudes of PQ buses, the same
    ordering as :func:`mismatch`.
    """
    case, _, pvpq, pq = _state_setup(net, injections)
    V = np.asarray(v_mag) * np.exp(1j * np.asarray(v_ang))
    return _jac(case.Y, V, pvpq, pq)


def state_layout(net: Network):
    """Index arrays (pvpq, pq) used by :func:`mismatch` and :func:`jacobian`."""
    _, _, pvpq, pq = _state_setup(net, None)
    return pvpq, pq


def branch_flows(net: Network, sol: PowerFlowSolution):
    """Complex power entering each in-service branch at both ends (pu)."""
    idx = net.bus_index()
    V = sol.voltage
    out = []
    for br in net.branches:
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_shunt
        a = br.tap
        i_f = (ys + bc) / a**2 * V[f] - ys / a * V[t]
        i_t = (ys + bc) * V[t] - ys / a * V[f]
        out.append((br.id, V[f] * np.conj(i_f), V[t] * np.conj(i_t)))
    return out


def total_losses(net: Network, sol: PowerFlowSolution) -> float:
    """Active losses (pu) in branches and bus shunt conductances."""
    loss = sum((sf + st).real for _, sf, st in branch_flows(net, sol))
    g = np.array([b.g_shunt for b in net.buses]) / net.mva_base
    return float(loss + np.sum(g * sol.v_mag**2))
