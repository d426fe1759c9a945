"""Q-V curves: reactive injection needed to hold a bus at each candidate voltage."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import Network, NetworkError
from .powerflow import Injections, PowerFlowOptions, PreparedCase, solve_power_flow


class QVError(ValueError):
    pass


class UnstableBranchError(QVError):
    pass


@dataclass(frozen=True)
class QVTarget:
    v_target: float
    margin: float = 0.05

    @classmethod
    def from_band(cls, v_min: float, margin: float = 0.05) -> "QVTarget":
        """Target a fixed fraction above the lower band edge (0.95 * 1.05 = 0.9975)."""
        return cls(v_min * (1.0 + margin), margin)


@dataclass
class QVCurve:
    bus: int
    v: np.ndarray  # pu, strictly increasing
    q: np.ndarray  # Mvar injected by the fictitious source
    converged: np.ndarray
    hour: int | None = None
    network_hash: str = ""
    v_natural: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.v) <= 0):
            raise QVError("curve voltages must be strictly increasing")
        if int(np.sum(self.converged)) < 2:
            raise QVError(f"bus {self.bus}: fewer than 2 converged Q-V samples")

    @property
    def nose(self) -> tuple[float, float]:
        """(v, q) of the converged sample with minimum q."""
        ok = np.flatnonzero(self.converged)
        k = ok[np.argmin(self.q[ok])]
        return float(self.v[k]), float(self.q[k])

    def q_at(self, v_target: float) -> float:
        ok = np.asarray(self.converged, dtype=bool)
        return float(np.interp(v_target, self.v[ok], self.q[ok]))


def _grid(v_lo: float, v_hi: float, step: float) -> np.ndarray:
    if not v_lo < v_hi:
        raise QVError("v_range must satisfy v_lo < v_hi")
    if step <= 0:
        raise QVError("step must be positive")
    n = int(np.floor((v_hi - v_lo) / step + 1e-9))
    return np.round(v_lo + step * np.arange(n + 1), 12)


def trace_qv_curve(net: Network, bus: int, injections: Injections | None = None,
                   v_range: tuple[float, float] = (0.80, 1.10), step: float = 0.005,
                   options: PowerFlowOptions | None = None, hour: int | None = None) -> QVCurve:
    """Hold ``bus`` at each sampled voltage with an unlimited source and record its Q.

    Machines at the traced bus are frozen at their output in the unmodified
    snapshot, so q is zero at the natural operating voltage.  Samples are
    solved in continuation order outward from the natural voltage, each
    warm-started from its neighbour; the sweep itself is deterministic.
    """
    options = options or PowerFlowOptions()
    idx = net.bus_index()
    if bus not in idx:
        raise NetworkError(f"unknown bus {bus}")
    if bus == net.slack_bus.id:
        raise QVError("cannot trace a Q-V curve at the slack bus")
    base = solve_power_flow(net, injections, options)
    if not base.converged:
        raise QVError(f"snapshot power flow does not converge: {base.message}")
    k = idx[bus]
    v_nat = float(base.v_mag[k])

    inj = Injections() if injections is None else Injections(
        dict(injections.load_p), dict(injections.load_q), dict(injections.machine_p),
        dict(injections.machine_v), dict(injections.bus_p), dict(injections.bus_q))
    q_mach = sum(q for mid, q in base.machine_q.items() if net.machine(mid).bus == bus)
    if any(m.bus == bus and m.in_service for m in net.machines):
        inj.bus_q[bus] = inj.bus_q.get(bus, 0.0) + q_mach

    case = PreparedCase(net)
    lp, lq, mp, mv, extra = case.vectors(inj)
    sfix = case.fixed_injection(lp, lq, mp, extra)
    vset = case.setpoints(mv)
    warm = PowerFlowOptions(options.tol, options.max_iter, options.enforce_q_limits, False, options.max_q_passes)

    grid = _grid(*v_range, step)
    q = np.full(grid.size, np.nan)
    ok = np.zeros(grid.size, dtype=bool)
    start = int(np.searchsorted(grid, v_nat))
    for order in (range(start, grid.size), range(start - 1, -1, -1)):
        prev = base.voltage
        for j in order:
            sol = case.solve(sfix, vset, warm, v0=prev, hold=(k, float(grid[j])))
            if not sol.converged:
                sol = case.solve(sfix, vset, options, hold=(k, float(grid[j])))
            if sol.converged:
                q[j] = sol.q_regulated[k] * net.mva_base
                ok[j] = True
                prev = sol.voltage
    return QVCurve(bus, grid, q, ok, hour, net.digest(), v_nat,
                   {"v_range": list(v_range), "step": step})


def required_delta_q(curve: QVCurve, target: QVTarget | float) -> float:
    """Installed-rating demand (Mvar) to reach the target on the stable branch.

    Linear interpolation of q at the target; zero when the bus already meets
    it.  A target left of the nose cannot be reached by shunt injection.
    """
    vt = target.v_target if isinstance(target, QVTarget) else float(target)
    ok = np.asarray(curve.converged, dtype=bool)
    v, q = curve.v[ok], curve.q[ok]
    if not v[0] - 1e-12 <= vt <= v[-1] + 1e-12:
        raise QVError(f"target {vt:.4f} pu outside traced span [{v[0]:.4f}, {v[-1]:.4f}]")
    v_nose, _ = curve.nose
    if vt < v_nose - 1e-12:
        raise UnstableBranchError(
            f"bus {curve.bus}: target {vt:.4f} pu lies on the unstable branch (nose at {v_nose:.4f} pu); "
            "target unreachable by shunt compensation")
    return max(float(np.interp(vt, v, q)), 0.0)


def write_qv_csv(curve: QVCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["v_pu", "q_mvar", "converged"])
        for v, q, c in zip(curve.v, curve.q, curve.converged):
            w.writerow([format(v, ".10g"), format(q, ".10g") if c else "", int(c)])
