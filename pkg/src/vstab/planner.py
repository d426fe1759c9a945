"""Two-step reactive power demand planning.

Step 1 sweeps the year with hourly power flows, ranks buses that leave the
voltage band and installs static compensation at the top-ranked bus, sized
from its Q-V curve, until the year is clean.  Step 2 replays a contingency
list at the critical hours with RMS simulation, scores each run with the
trajectory violation integral and installs dynamic compensation at the
worst bus until every run stays inside the recovery envelope.  A final
annual sweep confirms the band still holds.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (RANK_KEYS, TVIEnvelope, ViolationBand, assess_violations, compute_tvi,
                      count_violations, critical_hours, write_envelope_csv, write_tvi_csv,
                      write_violations_csv)
from .netmodel import DYNAMIC, STATIC, Compensator, Network, without_elements
from .powerflow import PowerFlowOptions, solve_power_flow
from .qds import ProfileSet, QDSError, default_jobs, hour_injections, network_at_hour, run_qds, write_series_csv
from .qv import QVError, QVTarget, trace_qv_curve, required_delta_q, write_qv_csv
from .rms import (BusFault, ClearFault, DynamicsError, LineFault, TripGenerator, TripLine,
                  dynamic_compensator, initialize_dynamics, run_rms, write_trajectory_csv)

log = logging.getLogger(__name__)


class PlannerError(RuntimeError):
    """Planning stopped without a clean result; ``details`` is JSON-ready."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


class IterationCapError(PlannerError):
    pass


class InfeasibleError(PlannerError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    band: ViolationBand = ViolationBand()
    margin: float = 0.05
    beta: float = 0.015
    v_st: float | None = None  # None: each bus's own settled value
    tvi_window: float | None = None  # None: disturbance start to run end
    contingencies: str | None = None
    max_iter: int = 20
    k_critical: int = 1
    rank_order: tuple[str, ...] = RANK_KEYS
    top_k: int = 1  # Step-1 buses compensated per iteration
    dt: float = 0.005
    max_device_mvar: float = 5000.0
    qv_range: tuple[float, float] = (0.80, 1.10)
    qv_step: float = 0.005
    enforce_q_limits: bool = True

    def __post_init__(self):
        if self.margin < 0 or self.beta < 0:
            raise ValueError("margin and beta must be >= 0")
        if self.max_iter < 1 or self.k_critical < 1 or self.top_k < 1:
            raise ValueError("max_iter, k_critical and top_k must be >= 1")
        if self.dt <= 0 or self.max_device_mvar <= 0 or self.qv_step <= 0:
            raise ValueError("dt, max_device_mvar and qv_step must be positive")
        if self.v_st is not None and self.v_st <= 0:
            raise ValueError("v_st must be positive")
        if self.tvi_window is not None and self.tvi_window <= 0:
            raise ValueError("tvi_window must be positive")
        if sorted(self.rank_order) != sorted(RANK_KEYS):
            raise ValueError(f"rank_order must be a permutation of {RANK_KEYS}")

    @property
    def target(self) -> QVTarget:
        return QVTarget.from_band(self.band.v_min, self.margin)

    @property
    def pf_options(self) -> PowerFlowOptions:
        return PowerFlowOptions(enforce_q_limits=self.enforce_q_limits)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = {"v_min": self.band.v_min, "v_max": self.band.v_max}
        d["rank_order"] = list(self.rank_order)
        d["qv_range"] = list(self.qv_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "band" in d and isinstance(d["band"], dict):
            d["band"] = ViolationBand(**d["band"])
        for k in ("rank_order", "qv_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- reports

def _rnd(x: float) -> float:
    return float(format(float(x), ".10g"))


def _mvar_vector(d: dict[int, float]) -> dict[str, float]:
    return {str(b): _rnd(v) for b, v in sorted(d.items())}


def _ratings(d: dict[int, float]) -> dict[str, int]:
    # ratings rounded up to whole Mvar; tiny float noise does not bump a unit
    return {str(b): int(math.ceil(v - 1e-9)) for b, v in sorted(d.items()) if v > 0}


@dataclass
class Step1Report:
    dq_long: dict[int, float]
    iterations: list[dict]
    critical_hours: list[int]
    critical_hours_final: list[int]
    final_violations: int
    final_series: object = field(default=None, repr=False)
    initial_series: object = field(default=None, repr=False)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def total_mvar(self) -> float:
        return float(sum(self.dq_long.values()))

    def to_dict(self) -> dict:
        return {"dq_long_mvar": _mvar_vector(self.dq_long), "ratings_mvar": _ratings(self.dq_long),
                "total_mvar": _rnd(self.total_mvar), "n_iterations": self.n_iterations,
                "iterations": self.iterations, "critical_hours": self.critical_hours,
                "critical_hours_final": self.critical_hours_final, "final_violations": self.final_violations}


@dataclass
class Step2Report:
    dq_short: dict[int, float]
    iterations: list[dict]
    final_qds: dict
    runs_clean: bool
    final_series: object = field(default=None, repr=False)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def total_mvar(self) -> float:
        return float(sum(self.dq_short.values()))

    def to_dict(self) -> dict:
        return {"dq_short_mvar": _mvar_vector(self.dq_short), "ratings_mvar": _ratings(self.dq_short),
                "total_mvar": _rnd(self.total_mvar), "n_iterations": self.n_iterations,
                "iterations": self.iterations, "final_qds": self.final_qds, "runs_clean": self.runs_clean}


@dataclass
class FullReport:
    step1: Step1Report
    step2: Step2Report
    combined: dict[int, float]
    inputs: dict
    config: dict

    @property
    def verified(self) -> bool:
        return self.step1.final_violations == 0 and self.step2.runs_clean and self.step2.final_qds["violations"] == 0

    def to_dict(self) -> dict:
        return {"inputs": self.inputs, "config": self.config, "step1": self.step1.to_dict(),
                "step2": self.step2.to_dict(), "combined_mvar": _mvar_vector(self.combined),
                "combined_ratings_mvar": _ratings(self.combined),
                "total_mvar": _rnd(sum(self.combined.values())), "verified": self.verified}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _qds_summary(series, band: ViolationBand) -> dict:
    ok = np.asarray(series.converged, dtype=bool)
    v = series.v[:, ok]
    return {"violations": count_violations(series, band), "converged_hours": int(ok.sum()),
            "horizon": int(series.horizon), "v_min": _rnd(v.min()), "v_max": _rnd(v.max())}


# ----------------------------------------------------------------- step 1

def _write_qds(series, stats, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    write_series_csv(series, folder / "qds_voltages.csv")
    (folder / "qds_meta.json").write_text(json.dumps(series.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_violations_csv(stats, folder / "violations.csv")


def step1_long_term(net: Network, profiles: ProfileSet, config: PlannerConfig = PlannerConfig(),
                    jobs: int | None = None, out_dir: str | Path | None = None) -> tuple[Network, Step1Report]:
    """Static compensation loop over the annual sweep.

    Each iteration compensates the ``top_k`` highest-ranked undervoltage
    buses, each sized on its Q-V curve at its own worst hour.  A bus whose
    target is unreachable is logged and the next rank is tried.
    """
    target = config.target
    opts = config.pf_options
    dq = {b.id: 0.0 for b in net.buses}
    iters: list[dict] = []
    first = None
    out = Path(out_dir) if out_dir is not None else None
    for it in range(1, config.max_iter + 1):
        try:
            series = run_qds(net, profiles, opts, jobs)
        except QDSError as exc:
            raise InfeasibleError(f"step 1: {exc}", {"step": 1, "iteration": it, "dq_long_mvar": _mvar_vector(dq)}) \
                from None
        first = series if first is None else first
        stats = assess_violations(series, config.band, config.rank_order)
        n_viol = count_violations(series, config.band)
        folder = out / f"iter_{it:02d}" if out is not None else None
        if folder is not None:
            _write_qds(series, stats, folder)
        rec = {"iteration": it, "violations": n_viol,
               "ranked": [{"bus": s.bus, "rank": s.rank, "f_n": s.f_n, "dv_max": _rnd(s.dv_max), "t_v": _rnd(s.t_v),
                           "side": s.side, "worst_hour": s.worst_hour, "f_failed": s.f_failed} for s in stats],
               "installed": [], "skipped": []}
        iters.append(rec)
        if not stats:
            crit0 = critical_hours(first, config.k_critical)
            return net, Step1Report(dq, iters, crit0, critical_hours(series, config.k_critical), 0, series, first)
        for s in stats:
            if len(rec["installed"]) >= config.top_k:
                break
            reason = None
            if s.side != "under":
                reason = "overvoltage cannot be fixed by capacitive compensation"
            else:
                try:
                    curve = trace_qv_curve(net, s.bus, hour_injections(profiles, s.worst_hour),
                                           config.qv_range, config.qv_step, opts, s.worst_hour)
                    q = required_delta_q(curve, target)
                except QVError as exc:
                    reason = str(exc)
                else:
                    if q <= 0:
                        reason = "Q-V curve shows no demand at the target"
            if reason is not None:
                log.info("step1 iteration %d: skip bus %d (%s)", it, s.bus, reason)
                rec["skipped"].append({"bus": s.bus, "reason": reason})
                continue
            name = f"qv_curve_{s.bus}_{s.worst_hour}.csv"
            if folder is not None:
                write_qv_csv(curve, folder / name)
            net = _install(net, s.bus, q, STATIC)
            dq[s.bus] += q
            rec["installed"].append({"bus": s.bus, "hour": s.worst_hour, "v_target": _rnd(target.v_target),
                                     "dq_mvar": _rnd(q), "qv_curve": name, "v_natural": _rnd(curve.v_natural)})
        if not rec["installed"]:
            raise InfeasibleError(f"step 1: no violating bus can reach {target.v_target:.4f} pu",
                                  {"step": 1, "iteration": it, "violations": n_viol, "skipped": rec["skipped"],
                                   "dq_long_mvar": _mvar_vector(dq)})
    raise IterationCapError(f"step 1: violations remain after {config.max_iter} iterations",
                            {"step": 1, "iterations": iters, "dq_long_mvar": _mvar_vector(dq)})


def _install(net: Network, bus: int, q: float, kind: str) -> Network:
    from .netmodel import apply_compensation

    dev = Compensator(bus, q, STATIC) if kind == STATIC else dynamic_compensator(bus, q)
    return apply_compensation(net, dev)


# ----------------------------------------------------------------- step 2

def contingency_window(events, t_end: float) -> tuple[float, tuple[float, float] | None]:
    """Disturbance start and the fault-on interval (None without a fault)."""
    evs = sorted(events, key=lambda e: e.time)
    if not evs:
        return 0.0, None
    start = evs[0].time
    faults = [e.time for e in evs if isinstance(e, (BusFault, LineFault))]
    if not faults:
        return start, None
    t_on = faults[0]
    clears = [e.time for e in evs if isinstance(e, ClearFault) and e.time >= t_on]
    return start, (t_on, clears[0] if clears else t_end)


def post_contingency_network(net: Network, events) -> Network:
    """Steady-state network after the events: faulted element cleared, tripped units out."""
    machines, lines = [], []
    faulted = None
    for ev in sorted(events, key=lambda e: e.time):
        if isinstance(ev, LineFault):
            faulted = ev.line
        elif isinstance(ev, BusFault):
            faulted = None
        elif isinstance(ev, ClearFault):
            if ev.trip_line and faulted is not None:
                lines.append(faulted)
            faulted = None
        elif isinstance(ev, TripGenerator):
            machines.append(ev.machine)
        elif isinstance(ev, TripLine):
            lines.append(ev.line)
    return without_elements(net, machines, lines) if machines or lines else net


@dataclass
class _Run:
    hour: int
    name: str
    traj: object
    tvi: object
    start: float


def _simulate(args) -> _Run:
    net, profiles, hour, cont, config = args
    n = network_at_hour(net, profiles, hour)
    sol = solve_power_flow(n, options=config.pf_options)
    if not sol.converged:
        raise PlannerError(f"hour {hour}: pre-contingency power flow does not converge ({sol.message})",
                           {"step": 2, "hour": hour})
    state = initialize_dynamics(n, sol)
    t_end = cont["t_end"]
    traj = run_rms(state, cont["events"], t_end, config.dt)
    start, excl = contingency_window(cont["events"], t_end)
    window = config.tvi_window if config.tvi_window is not None else t_end - start
    if config.v_st is not None:
        v_st = config.v_st
    elif traj.completed:
        v_st = traj.v_mag[:, -1].copy()
    else:
        v_st = traj.v_mag[:, 0].copy()  # collapsed run: score against pre-disturbance values
    env = TVIEnvelope(config.beta, v_st, window)
    res = compute_tvi(traj, env, start, excl)
    if not traj.completed:
        res.violated[:] = True
    return _Run(hour, cont["name"], traj, res, start)


def _run_all(net, profiles, hours, contingencies, config, jobs) -> list[_Run]:
    tasks = [(net, profiles, h, c, config) for h in hours for c in contingencies]
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(tasks) <= 1:
        return [_simulate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_simulate, tasks))


def step2_short_term(net: Network, profiles: ProfileSet, step1: Step1Report, contingencies: list[dict],
                     config: PlannerConfig = PlannerConfig(), jobs: int | None = None,
                     out_dir: str | Path | None = None,
                     final_dir: str | Path | None = None) -> tuple[Network, Step2Report]:
    """Dynamic compensation loop over critical hours and contingencies."""
    if step1.final_violations != 0:
        raise PlannerError("step 2 requires a successful step 1", {"step": 2})
    dq = {b.id: 0.0 for b in net.buses}
    iters: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    hours = list(step1.critical_hours)
    clean = not contingencies
    for it in range(1, config.max_iter + 1):
        if not contingencies:
            break
        try:
            runs = _run_all(net, profiles, hours, contingencies, config, jobs)
        except DynamicsError as exc:
            raise PlannerError(f"step 2: {exc}", {"step": 2, "iteration": it}) from None
        folder = out / f"iter_{it:02d}" if out is not None else None
        if folder is not None:
            folder.mkdir(parents=True, exist_ok=True)
        table = []
        for r in runs:
            tag = f"{r.name}_h{r.hour}"
            if folder is not None:
                write_trajectory_csv(r.traj, folder / f"rms_{tag}.csv")
                write_tvi_csv(r.tvi, folder / f"tvi_{tag}.csv")
                write_envelope_csv(TVIEnvelope(config.beta, float(np.mean(r.traj.v_mag[:, -1])),
                                               config.tvi_window or float(r.traj.t[-1] - r.start)),
                                   folder / f"envelope_{tag}.csv", t0=r.start)
            table.append({"hour": r.hour, "contingency": r.name, "completed": bool(r.traj.completed),
                          "t_start": _rnd(r.start),
                          "violated_buses": [int(b) for b, f in zip(r.tvi.bus_ids, r.tvi.violated) if f],
                          "tvi": {str(b): _rnd(x) for b, x, _, f in r.tvi.as_rows() if f},
                          "dv_max": {str(b): _rnd(d) for b, _, d, f in r.tvi.as_rows() if f},
                          "final_max_derivative": _rnd(r.traj.final_max_derivative)})
        rec = {"iteration": it, "runs": table, "installed": None}
        iters.append(rec)
        bad = [r for r in runs if r.tvi.any_violation]
        if not bad:
            clean = True
            break
        # deepest violation over all runs; earliest run wins ties
        worst = max(bad, key=lambda r: float(r.tvi.dv_max.max()))
        bus = worst.tvi.worst_bus()
        k = worst.tvi.bus_ids.index(bus)
        dv = float(worst.tvi.dv_max[k])
        cont = next(c for c in contingencies if c["name"] == worst.name)
        post = post_contingency_network(network_at_hour(net, profiles, worst.hour), cont["events"])
        details = {"step": 2, "iteration": it, "bus": bus, "hour": worst.hour, "contingency": worst.name,
                   "dq_short_mvar": _mvar_vector(dq)}
        v_end = float(worst.traj.v_mag[k, -1]) if worst.traj.completed else None
        try:
            curve = trace_qv_curve(post, bus, None, config.qv_range, config.qv_step, config.pf_options, worst.hour)
            if v_end is None:
                v_end = curve.v_natural
            v_target = v_end + dv
            q = float(np.ceil(required_delta_q(curve, v_target) - 1e-9))
        except QVError as exc:
            raise InfeasibleError(f"step 2: bus {bus} cannot be held inside the envelope by shunt compensation "
                                  f"({exc})", details) from None
        installed = sum(c.q_rating for c in net.compensators if c.bus == bus and c.kind == DYNAMIC)
        if q <= 0:
            q = 1.0  # the static map says enough, the trajectory disagrees: add the smallest unit
        if installed + q > config.max_device_mvar:
            raise InfeasibleError(f"step 2: bus {bus} needs more than {config.max_device_mvar:g} Mvar dynamic "
                                  "compensation (infeasible by shunt)", details)
        name = f"qv_curve_{bus}_{worst.hour}.csv"
        if folder is not None:
            write_qv_csv(curve, folder / name)
        net = _install(net, bus, q, DYNAMIC)
        dq[bus] += q
        rec["installed"] = {"bus": bus, "hour": worst.hour, "contingency": worst.name, "dv_max": _rnd(dv),
                            "v_end": _rnd(v_end), "v_target": _rnd(v_target), "dq_mvar": _rnd(q), "qv_curve": name}
    else:
        raise IterationCapError(f"step 2: envelope violations remain after {config.max_iter} iterations",
                                {"step": 2, "iterations": iters, "dq_short_mvar": _mvar_vector(dq)})
    series = run_qds(net, profiles, config.pf_options, jobs)
    stats = assess_violations(series, config.band, config.rank_order)
    if final_dir is not None:
        _write_qds(series, stats, Path(final_dir))
    return net, Step2Report(dq, iters, _qds_summary(series, config.band), clean, series)


# -------------------------------------------------------------- two step

def run_two_step(net: Network, profiles: ProfileSet, contingencies: list[dict],
                 config: PlannerConfig = PlannerConfig(), out_dir: str | Path | None = None,
                 jobs: int | None = None, inputs: dict | None = None) -> tuple[Network, FullReport]:
    """Step 1, Step 2 and the final sweep; writes the artifact tree when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    net1, r1 = step1_long_term(net, profiles, config, jobs, out / "step1" if out else None)
    net2, r2 = step2_short_term(net1, profiles, r1, contingencies, config, jobs,
                                out / "step2" if out else None, out / "final" if out else None)
    combined = {b: r1.dq_long[b] + r2.dq_short[b] for b in r1.dq_long}
    base_inputs = {"network_hash": net.digest(), "profile_hash": profiles.digest(),
                   "contingencies": [{"name": c["name"], "n_events": len(c["events"]), "t_end": c["t_end"]}
                                     for c in contingencies]}
    base_inputs.update(inputs or {})
    rep = FullReport(r1, r2, combined, base_inputs, config.to_dict())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
        (out / "report.md").write_text(report_markdown(rep), encoding="utf-8")
    return net2, rep


def _vec_table(title: str, vec: dict[int, float]) -> list[str]:
    rows = [(b, v) for b, v in sorted(vec.items()) if v > 0]
    lines = [f"### {title}", "", "| bus | Mvar | rating (Mvar) |", "|---:|---:|---:|"]
    lines += [f"| {b} | {v:.3f} | {math.ceil(v - 1e-9)} |" for b, v in rows] or ["| - | 0 | 0 |"]
    return lines + [""]


def report_markdown(rep: FullReport) -> str:
    r1, r2 = rep.step1, rep.step2
    L = ["# Reactive power demand report", "",
         f"Network hash `{rep.inputs['network_hash'][:16]}`, profile hash `{rep.inputs['profile_hash'][:16]}`.", "",
         f"Verification: {'passed' if rep.verified else 'FAILED'}.", "",
         "## Step 1: annual sweep and static compensation", "",
         "| iteration | violations | violating buses | installed |", "|---:|---:|---:|---|"]
    for it in r1.iterations:
        inst = ", ".join(f"bus {d['bus']} +{d['dq_mvar']:.2f} Mvar (hour {d['hour']})" for d in it["installed"]) or "-"
        L.append(f"| {it['iteration']} | {it['violations']} | {len(it['ranked'])} | {inst} |")
    L += ["", f"Critical hours: {r1.critical_hours}.", ""]
    if r1.iterations and r1.iterations[0]["ranked"]:
        L += ["Initial ranking:", "", "| rank | bus | f_n | dV max (pu) | t_v (h) |", "|---:|---:|---:|---:|---:|"]
        L += [f"| {s['rank']} | {s['bus']} | {s['f_n']} | {s['dv_max']:.4f} | {s['t_v']:g} |"
              for s in r1.iterations[0]["ranked"]]
        L.append("")
    L += _vec_table("Long-term demand", r1.dq_long)
    L += ["## Step 2: contingency simulation and dynamic compensation", "",
          "| iteration | hour | contingency | violated buses | installed |", "|---:|---:|---|---|---|"]
    for it in r2.iterations:
        inst = it["installed"]
        for run in it["runs"]:
            txt = f"bus {inst['bus']} +{inst['dq_mvar']:g} Mvar" if inst and inst["contingency"] == run["contingency"] \
                and inst["hour"] == run["hour"] else "-"
            L.append(f"| {it['iteration']} | {run['hour']} | {run['contingency']} | "
                     f"{', '.join(map(str, run['violated_buses'])) or 'none'} | {txt} |")
    L.append("")
    L += _vec_table("Short-term demand", r2.dq_short)
    q = r2.final_qds
    L += ["## Final annual sweep", "",
          f"{q['violations']} band violations over {q['converged_hours']}/{q['horizon']} converged hours; "
          f"voltage range {q['v_min']:.4f} to {q['v_max']:.4f} pu.", ""]
    L += _vec_table("Combined demand", rep.combined)
    return "\n".join(L)
