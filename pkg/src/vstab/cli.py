"""Command-line front end: ``vstab <subcommand> ...``.

Exit codes: 0 success, 1 infeasible or non-converged, 2 input error.
Every subcommand that writes files also writes a run manifest with the
input and output hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import (RANK_KEYS, TVIEnvelope, ViolationBand, assess_violations, compute_tvi,
                      write_envelope_csv, write_tvi_csv, write_violations_csv)
from .netmodel import NetworkError, bundled_path, load_network, save_network, validate
from .powerflow import PowerFlowOptions, solve_power_flow
from .qds import (ProfileError, ProfileSet, QDSError, hour_injections, load_profiles, network_at_hour,
                  read_series_csv, run_qds, save_profiles, write_series_csv)
from .qv import QVError, QVTarget, required_delta_q, trace_qv_curve, write_qv_csv
from .rms import DynamicsError, initialize_dynamics, load_contingencies, run_rms, write_trajectory_csv
from .synth import SynthConfig, synth_profiles

log = logging.getLogger("vstab")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


class RunFailed(Exception):
    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[dict] = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str = ""
    exit_code: int = 0
    tool: str = "vstab"
    version: str = __version__

    def add_input(self, path: str | Path | None) -> None:
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = sha256(path)

    def write(self, target: Path, command: str) -> Path:
        """Hash the outputs and write the manifest next to them.

        ``target`` is an output directory (every file below it is listed)
        or a single output file.
        """
        self.finished = _now()
        if target.is_dir():
            root, files = target, sorted(p for p in target.rglob("*") if p.is_file())
            path = root / f"{command}_manifest.json"
        else:
            root, files = target.parent, [target]
            path = target.with_name(f"{target.name}.{command}_manifest.json")
        self.outputs = [{"path": p.relative_to(root).as_posix(), "sha256": sha256(p), "bytes": p.stat().st_size}
                        for p in files if not p.name.endswith("manifest.json")]
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------- helpers

def _resolve(path) -> Path:
    """A bare file name that does not exist locally falls back to the bundled data file."""
    p = Path(path)
    if not p.exists() and p.name == str(path) and bundled_path(p.name).is_file():
        return bundled_path(p.name)
    return p


def _network(args):
    path = _resolve(args.network) if args.network else bundled_path("ieee39.json")
    net = load_network(path)
    args._inputs.append(path)
    return net


def _profiles(args, net) -> ProfileSet:
    if getattr(args, "profiles", None):
        args._inputs.append(args.profiles)
        return load_profiles(args.profiles, net)
    return synth_profiles(net, args.seed, args.horizon)


def _options(args) -> PowerFlowOptions:
    return PowerFlowOptions(enforce_q_limits=not getattr(args, "no_q_limits", False))


def _band(args) -> ViolationBand:
    return ViolationBand(args.vmin, args.vmax)


def _injections(args, net):
    if args.hour is None:
        return net, None
    prof = _profiles(args, net)
    return net, hour_injections(prof, args.hour)


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _planner_config(args):
    from .planner import PlannerConfig

    d = {}
    if getattr(args, "config", None):
        args._inputs.append(args.config)
        cpath = Path(args.config)
        if not cpath.is_file():
            raise FileNotFoundError(f"config file not found: {cpath}")
        try:
            d = json.loads(cpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{cpath}: invalid JSON ({exc})") from None
    over = {"margin": args.margin, "beta": args.beta, "max_iter": args.max_iter, "k_critical": args.k,
            "dt": args.dt, "top_k": args.top_k}
    d.update({k: v for k, v in over.items() if v is not None})
    if args.vmin is not None or args.vmax is not None:
        band = dict(d.get("band", {}))
        band.update({k: v for k, v in (("v_min", args.vmin), ("v_max", args.vmax)) if v is not None})
        d["band"] = band
    if args.no_q_limits:
        d["enforce_q_limits"] = False
    if getattr(args, "contingencies", None):
        d["contingencies"] = str(args.contingencies)
    return PlannerConfig.from_dict(d)


def _contingencies(args, cfg):
    path = getattr(args, "contingencies", None) or cfg.contingencies
    if path is None:
        return []
    path = _resolve(path)
    args._inputs.append(path)
    return load_contingencies(path)


# ------------------------------------------------------------ subcommands

def cmd_validate(args):
    net = _network(args)
    validate(net)
    print(f"{args.network or 'ieee39.json'}: {net.n_bus} buses, {len(net.machines)} machines, "
          f"{len(net.loads)} loads, {len(net.lines())} lines, {len(net.branches) - len(net.lines())} transformers, "
          f"{len(net.compensators)} compensators; valid")
    return None


def cmd_powerflow(args):
    net, inj = _injections(args, _network(args))
    sol = solve_power_flow(net, inj, _options(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    import csv

    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus_id", "v_pu", "angle_deg", "p_mw", "q_mvar"])
        for i, b in enumerate(sol.bus_ids):
            w.writerow([b, format(sol.v_mag[i], ".10g"), format(np.degrees(sol.v_ang[i]), ".10g"),
                        format(sol.p_inj[i] * net.mva_base, ".10g"), format(sol.q_inj[i] * net.mva_base, ".10g")])
    print(f"converged={sol.converged} iterations={sol.iterations} max_mismatch={sol.max_mismatch:.3e}")
    if not sol.converged:
        raise RunFailed(f"power flow did not converge: {sol.message}")
    return out


def cmd_qds(args):
    net = _network(args)
    prof = _profiles(args, net)
    series = run_qds(net, prof, _options(args), args.jobs)
    out = _outdir(args.out)
    write_series_csv(series, out / "qds_voltages.csv")
    (out / "qds_meta.json").write_text(json.dumps(series.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{series.meta['converged_hours']}/{series.horizon} hours converged; "
          f"v in [{series.v.min():.4f}, {series.v.max():.4f}] pu")
    return out


def cmd_violations(args):
    if not Path(args.series).is_file():
        raise FileNotFoundError(f"voltage series not found: {args.series}")
    args._inputs.append(args.series)
    series = read_series_csv(args.series)
    stats = assess_violations(series, _band(args), tuple(args.order.split(",")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_violations_csv(stats, out)
    for s in stats:
        print(f"rank {s.rank}: bus {s.bus} f_n={s.f_n} dv_max={s.dv_max:.4f} t_v={s.t_v:g}")
    return out


def cmd_qv(args):
    net, inj = _injections(args, _network(args))
    curve = trace_qv_curve(net, args.bus, inj, (args.v_lo, args.v_hi), args.step, _options(args), args.hour)
    out = _outdir(args.out)
    write_qv_csv(curve, out / f"qv_curve_{args.bus}_{args.hour if args.hour is not None else 'base'}.csv")
    v_nose, q_nose = curve.nose
    print(f"bus {args.bus}: natural {curve.v_natural:.4f} pu, nose ({v_nose:.3f} pu, {q_nose:.1f} Mvar)")
    if args.target is not None:
        dq = required_delta_q(curve, QVTarget(args.target))
        print(f"required dQ at {args.target:.4f} pu: {dq:.3f} Mvar")
        (out / "qv_demand.json").write_text(json.dumps({"bus": args.bus, "hour": args.hour, "v_target": args.target,
                                                         "dq_mvar": float(format(dq, ".10g"))}, indent=2) + "\n",
                                            encoding="utf-8")
    return out


def cmd_rms(args):
    net = _network(args)
    if args.hour is not None:
        net = network_at_hour(net, _profiles(args, net), args.hour)
    path = _resolve(args.contingencies)
    args._inputs.append(path)
    conts = load_contingencies(path)
    if args.name:
        conts = [c for c in conts if c["name"] in args.name]
        if not conts:
            raise InputError(f"no contingency named {args.name}")
    sol = solve_power_flow(net, options=_options(args))
    if not sol.converged:
        raise RunFailed(f"initial power flow did not converge: {sol.message}")
    state = initialize_dynamics(net, sol)
    out = _outdir(args.out)
    failed = []
    for c in conts:
        tr = run_rms(state, c["events"], args.t_end or c["t_end"], args.dt)
        write_trajectory_csv(tr, out / f"rms_{c['name']}.csv")
        print(f"{c['name']}: completed={tr.completed} v_min={tr.v_mag.min():.4f} "
              f"final max derivative={tr.final_max_derivative:.2e}")
        if not tr.completed:
            failed.append(c["name"])
    if failed:
        raise RunFailed(f"simulation collapsed: {', '.join(failed)}")
    return out


class _CsvTrace:
    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        if header[0] != "t_s":
            raise InputError(f"{path}: not a trajectory file")
        d = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        self.bus_ids = [int(b) for b in header[1:]]
        self.t = d[:, 0]
        self.v_mag = d[:, 1:].T


def cmd_tvi(args):
    if not Path(args.trajectory).is_file():
        raise FileNotFoundError(f"trajectory not found: {args.trajectory}")
    args._inputs.append(args.trajectory)
    tr = _CsvTrace(args.trajectory)
    v_st = tr.v_mag[:, -1] if args.v_st is None else args.v_st
    t_end = args.t_end if args.t_end is not None else float(tr.t[-1] - args.t_start)
    env = TVIEnvelope(args.beta, v_st, t_end)
    res = compute_tvi(tr, env, args.t_start, tuple(args.exclude) if args.exclude else None)
    out = _outdir(args.out)
    write_tvi_csv(res, out / "tvi.csv")
    write_envelope_csv(env, out / "envelope.csv", t0=args.t_start)
    bad = [b for b, _, _, f in res.as_rows() if f]
    print(f"violated buses: {bad if bad else 'none'}")
    return out


def _plan_common(args):
    net = _network(args)
    prof = _profiles(args, net)
    cfg = _planner_config(args)
    return net, prof, cfg


def _clean(out: Path, names) -> None:
    for n in names:
        p = out / n
        if p.is_dir():
            shutil.rmtree(p)
        elif p.is_file():
            p.unlink()


def cmd_plan_step1(args):
    from .planner import step1_long_term

    net, prof, cfg = _plan_common(args)
    out = _outdir(args.out)
    _clean(out, ["step1", "network_step1.json", "step1_report.json"])
    net1, rep = step1_long_term(net, prof, cfg, args.jobs, out / "step1")
    save_network(net1, out / "network_step1.json")
    (out / "step1_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    _plots(args, out / "step1", cfg)
    print(f"step 1: {rep.n_iterations} iterations, {rep.total_mvar:.2f} Mvar, critical hours {rep.critical_hours}")
    return out


def cmd_plan_step2(args):
    from .planner import Step1Report, step2_short_term

    net, prof, cfg = _plan_common(args)
    if not Path(args.step1).is_file():
        raise FileNotFoundError(f"step-1 report not found: {args.step1}")
    args._inputs.append(args.step1)
    d = json.loads(Path(args.step1).read_text(encoding="utf-8"))
    r1 = Step1Report({int(k): v for k, v in d["dq_long_mvar"].items()}, d["iterations"], d["critical_hours"],
                     d["critical_hours_final"], d["final_violations"])
    conts = _contingencies(args, cfg)
    out = _outdir(args.out)
    _clean(out, ["step2", "final", "network_step2.json", "step2_report.json"])
    net2, rep = step2_short_term(net, prof, r1, conts, cfg, args.jobs, out / "step2", out / "final")
    save_network(net2, out / "network_step2.json")
    (out / "step2_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    _plots(args, out, cfg)
    print(f"step 2: {rep.n_iterations} iterations, {rep.total_mvar:.0f} Mvar, final QDS "
          f"{rep.final_qds['violations']} violations")
    if rep.final_qds["violations"]:
        raise RunFailed("final QDS shows band violations", rep.final_qds)
    return out


def cmd_plan(args):
    from .planner import run_two_step

    net, prof, cfg = _plan_common(args)
    conts = _contingencies(args, cfg)
    out = _outdir(args.out)
    _clean(out, ["step1", "step2", "final", "report.json", "report.md", "infeasibility.json", "network_final.json"])
    inputs = {"profile_source": "file" if args.profiles else f"synthetic seed {args.seed} horizon {args.horizon}"}
    net2, rep = run_two_step(net, prof, conts, cfg, out, args.jobs, inputs)
    save_network(net2, out / "network_final.json")
    _plots(args, out, cfg)
    print(f"step 1: {rep.step1.n_iterations} iterations, {rep.step1.total_mvar:.2f} Mvar; "
          f"step 2: {rep.step2.n_iterations} iterations, {rep.step2.total_mvar:.0f} Mvar; "
          f"verified={rep.verified}")
    if not rep.verified:
        raise RunFailed("final verification failed", {"final_qds": rep.step2.final_qds})
    return out


def _plots(args, root: Path, cfg) -> None:
    if getattr(args, "no_plots", False):
        return
    from .plotting import render_tree

    render_tree(root, (cfg.band.v_min, cfg.band.v_max), cfg.target.v_target)


def cmd_synth(args):
    net = _network(args)
    cfg = SynthConfig(stress=args.stress) if args.stress is not None else SynthConfig()
    prof = synth_profiles(net, args.seed, args.horizon, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_profiles(prof, out)
    print(f"wrote {prof.horizon} hours to {out} (sha256 {sha256(out)[:16]})")
    return out


# ----------------------------------------------------------------- parser

def _add_network(p, profiles=False, hour=False):
    p.add_argument("--network", help="network JSON (default: bundled ieee39.json)")
    if profiles:
        p.add_argument("--profiles", help="profile CSV (default: synthetic profiles)")
        p.add_argument("--seed", type=int, default=42, help="seed for synthetic profiles")
        p.add_argument("--horizon", type=int, default=8760, help="hours of synthetic profiles")
    if hour:
        p.add_argument("--hour", type=int, help="profile hour to solve (default: base case)")
    p.add_argument("--no-q-limits", action="store_true", help="ignore machine reactive limits")


def _add_band(p, default=True):
    p.add_argument("--vmin", type=float, default=0.95 if default else None)
    p.add_argument("--vmax", type=float, default=1.05 if default else None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vstab", description="Two-step reactive power demand calculation.")
    ap.add_argument("--version", action="version", version=f"vstab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file")
    p.add_argument("--network", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("powerflow", help="solve one power flow")
    _add_network(p, profiles=True, hour=True)
    p.add_argument("--out", default="solution.csv")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("qds", help="annual quasi-dynamic sweep")
    _add_network(p, profiles=True)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", default="qds")
    p.set_defaults(func=cmd_qds)

    p = sub.add_parser("violations", help="rank band violations of a sweep")
    p.add_argument("--series", required=True, help="qds_voltages.csv")
    _add_band(p)
    p.add_argument("--order", default=",".join(RANK_KEYS), help="ranking keys, comma separated")
    p.add_argument("--out", default="violations.csv")
    p.set_defaults(func=cmd_violations)

    p = sub.add_parser("qv", help="trace a Q-V curve")
    _add_network(p, profiles=True, hour=True)
    p.add_argument("--bus", type=int, required=True)
    p.add_argument("--target", type=float)
    p.add_argument("--v-lo", type=float, default=0.80)
    p.add_argument("--v-hi", type=float, default=1.10)
    p.add_argument("--step", type=float, default=0.005)
    p.add_argument("--out", default="qv")
    p.set_defaults(func=cmd_qv)

    p = sub.add_parser("rms", help="simulate contingencies")
    _add_network(p, profiles=True, hour=True)
    p.add_argument("--contingencies", required=True)
    p.add_argument("--name", action="append", help="run only these contingencies")
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--t-end", type=float)
    p.add_argument("--out", default="rms")
    p.set_defaults(func=cmd_rms)

    p = sub.add_parser("tvi", help="score a trajectory against the recovery envelope")
    p.add_argument("--trajectory", required=True, help="rms_<name>.csv")
    p.add_argument("--beta", type=float, default=0.015)
    p.add_argument("--v-st", type=float, help="steady-state voltage (default: each bus's final value)")
    p.add_argument("--t-start", type=float, default=0.0, help="disturbance time")
    p.add_argument("--t-end", type=float, help="window length (default: to the end of the trace)")
    p.add_argument("--exclude", type=float, nargs=2, metavar=("T0", "T1"), help="fault-on interval")
    p.add_argument("--out", default="tvi")
    p.set_defaults(func=cmd_tvi)

    for name, func, helptext in (("plan-step1", cmd_plan_step1, "static compensation loop"),
                                 ("plan-step2", cmd_plan_step2, "dynamic compensation loop"),
                                 ("plan", cmd_plan, "both steps and the final sweep")):
        p = sub.add_parser(name, help=helptext)
        _add_network(p, profiles=True)
        if name != "plan-step1":
            p.add_argument("--contingencies", help="contingency list JSON")
        if name == "plan-step2":
            p.add_argument("--step1", required=True, help="step1_report.json from plan-step1")
        p.add_argument("--config", help="planner config JSON; flags override it")
        _add_band(p, default=False)
        p.add_argument("--margin", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--k", type=int, help="critical hours for step 2")
        p.add_argument("--top-k", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--jobs", type=int)
        p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("synth-profiles", help="write synthetic annual profiles")
    _add_network(p)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--horizon", type=int, default=8760)
    p.add_argument("--stress", type=float, help="stress window amplitude")
    p.add_argument("--out", default="profiles.csv")
    p.set_defaults(func=cmd_synth)
    return ap


def _config_snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_") and k != "func"}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args._inputs = []
    manifest = RunManifest(args.command, argv, _config_snapshot(args))
    from .planner import PlannerError

    code, root, details = EXIT_OK, None, None
    try:
        root = args.func(args)
    except (PlannerError, RunFailed) as exc:
        code, details = EXIT_FAIL, {"error": str(exc), **getattr(exc, "details", {})}
        print(f"vstab: {exc}", file=sys.stderr)
    except (QVError, QDSError) as exc:
        code = EXIT_FAIL
        print(f"vstab: {exc}", file=sys.stderr)
    except (FileNotFoundError, NetworkError, ProfileError, DynamicsError, InputError, ValueError) as exc:
        print(f"vstab: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if root is None and code == EXIT_OK:
        return code
    if root is None and hasattr(args, "out"):
        out = Path(args.out)
        if out.suffix == "":
            out.mkdir(parents=True, exist_ok=True)
        root = out if out.exists() else None
    if details is not None and root is not None:
        folder = root if root.is_dir() else root.parent
        (folder / "infeasibility.json").write_text(json.dumps(details, indent=2, sort_keys=True, default=str) + "\n",
                                                   encoding="utf-8")
    if root is not None and root.exists():
        for p in args._inputs:
            manifest.add_input(p)
        manifest.exit_code = code
        manifest.write(Path(root), args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
