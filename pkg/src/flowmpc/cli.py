"""Command-line entry point: ``flowmpc {ftle,plan,sweep,analyze}``.

Runs are described by a flat JSON config; ``--set key=value`` overrides file
keys and ``--out`` picks the output directory. Exit status is 0 on success,
1 on numeric/runtime failure and 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import analysis
from ._csv import SchemaError, write_rows
from .advect import GridSpec, IntegrationError, IntegratorConfig
from .flowfield import DoubleGyre, DoubleGyreParams
from .ftle import FtleError, extract_ridges, ftle_field, write_csv
from .mpc import MpcAbort, MpcConfig, SolverConfig, read_trajectory_csv, run_mpc, write_trajectory_csv

log = logging.getLogger("flowmpc")

REQUIRED = ("A", "epsilon", "omega")

DEFAULTS = {
    "T_H": 4.0,
    "dt": 0.1,
    "Q": 1.0,
    "R": 2.0,
    "Q2": 0.0,
    "u_max": 0.1,
    "goal": [0.5, 0.5],
    "tol_g": 1e-6,
    "max_iter": 500,
    "warm_start": True,
    "start": [2.0, 1.0],
    "t_start": 0.0,
    "duration": 60.0,
    "dt_int": 0.01,
    "ftle_x_min": 0.0,
    "ftle_x_max": 2.0,
    "ftle_y_min": 0.0,
    "ftle_y_max": 1.0,
    "ftle_nx": 201,
    "ftle_ny": 101,
    "ftle_t0": 0.0,
    "ftle_T": 15.0,
    "ridge_quantile": 0.9,
    "sweep_T_H": [float(h) for h in range(1, 11)],
    "sweep_R_over_Q": analysis.log_spaced(1.0, 100.0, 10),
    "sweep_omega": [2 * math.pi / p for p in (4, 6, 8, 10, 12, 14)],
    "sweep_workers": 1,
    "analyses": ["spectrum", "histograms", "orbit", "correlation"],
    "discard": None,
    "orbit_period": None,
    "orbit_tol": 0.02,
    "hist_bins": 30,
    "corr_T": None,
    "corr_cadence": 0.5,
    "corr_quantile": 0.9,
    "corr_nx": 101,
    "corr_ny": 51,
    "out": "out",
}
KNOWN = set(REQUIRED) | set(DEFAULTS)
ANALYSES = ("spectrum", "histograms", "orbit", "correlation")


class ConfigError(ValueError):
    pass


def load_config(path=None, overrides=(), out=None):
    """Merge defaults, the JSON file and ``key=value`` overrides; validate keys."""
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            cfg[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key.strip()] = raw
    if out is not None:
        cfg["out"] = out
    unknown = sorted(set(cfg) - KNOWN)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key in REQUIRED:
        if key not in cfg:
            raise ConfigError(f"missing required config key: {key}")
    merged = dict(DEFAULTS)
    merged.update(cfg)
    return merged


def _num(cfg, key):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number, got {v!r}")
    return float(v)


def _pair(cfg, key):
    v = cfg[key]
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v)):
        raise ConfigError(f"{key} must be a list of two numbers, got {v!r}")
    return (float(v[0]), float(v[1]))


def _numbers(cfg, key):
    v = cfg[key]
    if not (isinstance(v, list) and v and all(isinstance(x, (int, float)) for x in v)):
        raise ConfigError(f"{key} must be a non-empty list of numbers")
    return [float(x) for x in v]


def build(cfg):
    """Typed objects from a merged config dict; raises ``ConfigError`` on bad values."""
    try:
        params = DoubleGyreParams(A=_num(cfg, "A"), epsilon=_num(cfg, "epsilon"),
                                  omega=_num(cfg, "omega"))
        solver = SolverConfig(tol_g=_num(cfg, "tol_g"), max_iter=int(_num(cfg, "max_iter")))
        mpc = MpcConfig(T_H=_num(cfg, "T_H"), dt=_num(cfg, "dt"), Q=_num(cfg, "Q"),
                        R=_num(cfg, "R"), Q2=_num(cfg, "Q2"), u_max=_num(cfg, "u_max"),
                        goal=_pair(cfg, "goal"), solver=solver)
        icfg = IntegratorConfig(dt_int=_num(cfg, "dt_int"))
        grid = GridSpec(_num(cfg, "ftle_x_min"), _num(cfg, "ftle_x_max"),
                        _num(cfg, "ftle_y_min"), _num(cfg, "ftle_y_max"),
                        int(_num(cfg, "ftle_nx")), int(_num(cfg, "ftle_ny")))
        if not 0 < _num(cfg, "ridge_quantile") < 1:
            raise ValueError("ridge_quantile must lie in (0, 1)")
        if _num(cfg, "ftle_T") == 0:
            raise ValueError("ftle_T must be non-zero")
        if _num(cfg, "duration") < mpc.dt:
            raise ValueError("duration must cover at least one control step")
        _pair(cfg, "start")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return params, mpc, icfg, grid


def _outdir(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands

def cmd_ftle(cfg):
    params, _, icfg, grid = build(cfg)
    field = DoubleGyre(params)
    out = _outdir(cfg)
    T = abs(_num(cfg, "ftle_T"))
    t0 = _num(cfg, "ftle_t0")
    q = _num(cfg, "ridge_quantile")
    for name, sign in (("forward", 1.0), ("backward", -1.0)):
        f = ftle_field(field, grid, t0, sign * T, icfg)
        path = os.path.join(out, f"ftle_{name}.csv")
        write_csv(f, path)
        ridges = extract_ridges(f, q)
        write_rows(os.path.join(out, f"ridges_{name}.csv"), ("x", "y", "sigma"), ridges.points)
        print(f"{name}: {path} sigma_max={np.nanmax(f.sigma):.6g} ridge_points={len(ridges)}")
    return 0


def cmd_plan(cfg):
    params, mpc, icfg, _ = build(cfg)
    field = DoubleGyre(params)
    out = _outdir(cfg)
    path = os.path.join(out, "trajectory.csv")
    try:
        traj = run_mpc(field, _pair(cfg, "start"), _num(cfg, "t_start"), mpc,
                       _num(cfg, "duration"), icfg=icfg, warm_start=bool(cfg["warm_start"]))
    except MpcAbort as exc:
        if len(exc.trajectory.controls):
            write_trajectory_csv(exc.trajectory, path)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_trajectory_csv(traj, path)
    goal = np.asarray(mpc.goal)
    print(f"trajectory: {path} steps={len(traj.controls)} "
          f"final_distance={np.linalg.norm(traj.states[-1] - goal):.6g} "
          f"total_energy={traj.integrated_energy():.6g} "
          f"total_state_error={traj.integrated_state_error(goal):.6g} "
          f"converged_frac={np.mean(traj.converged):.3f}")
    return 0


def cmd_sweep(cfg):
    params, mpc, icfg, _ = build(cfg)
    out = _outdir(cfg)
    path = os.path.join(out, "sweep.csv")
    T_H_list = _numbers(cfg, "sweep_T_H")
    rq_list = _numbers(cfg, "sweep_R_over_Q")
    omegas = _numbers(cfg, "sweep_omega")
    if any(rq <= 0 for rq in rq_list):
        raise ConfigError("sweep_R_over_Q values must be positive")
    done = {}
    if os.path.exists(path):
        for r in analysis.read_sweep_csv(path):
            done[r.key] = r
    else:
        write_rows(path, analysis.SWEEP_COLUMNS, [])
    try:
        analysis.sweep(params, mpc, T_H_list, rq_list, omegas, _num(cfg, "duration"),
                       x_start=_pair(cfg, "start"), icfg=icfg, skip=set(done),
                       workers=int(_num(cfg, "sweep_workers")),
                       on_record=lambda r: (done.__setitem__(r.key, r),
                                            analysis.append_sweep_row(r, path)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    order = {}
    for n, key in enumerate((h, rq, w) for h in T_H_list for rq in rq_list for w in omegas):
        order.setdefault(key, n)
    records = sorted(done.values(), key=lambda r: (order.get(r.key, len(order)), r.key))
    analysis.write_sweep_csv(records, path)
    ok = sum(not r.failed for r in records)
    print(f"sweep: {path} rows={len(records)} succeeded={ok}")
    return 0 if ok else 1


def cmd_analyze(cfg, trajectory, which=None):
    params, mpc, icfg, _ = build(cfg)
    field = DoubleGyre(params)
    out = _outdir(cfg)
    traj = read_trajectory_csv(trajectory)
    which = which or cfg["analyses"]
    bad = sorted(set(which) - set(ANALYSES))
    if bad:
        raise ConfigError(f"unknown analyses: {', '.join(bad)}")
    discard = cfg["discard"]
    if "spectrum" in which:
        spec = analysis.energy_spectrum(traj, discard=discard)
        analysis.write_spectrum_csv(spec, os.path.join(out, "spectrum.csv"))
        analysis.write_peaks_csv(spec, os.path.join(out, "spectrum_peaks.csv"))
        print("spectrum peaks (rad/time): " + ", ".join(f"{p:.6g}" for p in spec.peaks[:5]))
    if "histograms" in which:
        pairs = analysis.control_histograms(traj, field, bins=int(_num(cfg, "hist_bins")))
        analysis.write_histogram_csvs(pairs, out)
        print(f"histograms: {len(pairs) * 2} files")
    if "orbit" in which:
        period = cfg["orbit_period"] or params.period
        if period is None:
            raise ConfigError("orbit analysis needs omega > 0 or orbit_period")
        orbit = analysis.detect_orbit(traj, mpc.goal, float(period), tol=_num(cfg, "orbit_tol"))
        analysis.write_orbit_csv(orbit, os.path.join(out, "orbit.csv"))
        print(f"orbit: periodic={orbit.is_periodic} period={orbit.period:.6g} "
              f"mean_radius={orbit.mean_radius:.6g} onset={orbit.onset_time:.6g}")
    if "correlation" in which:
        grid = GridSpec(_num(cfg, "ftle_x_min"), _num(cfg, "ftle_x_max"),
                        _num(cfg, "ftle_y_min"), _num(cfg, "ftle_y_max"),
                        int(_num(cfg, "corr_nx")), int(_num(cfg, "corr_ny")))
        T = cfg["corr_T"] if cfg["corr_T"] is not None else mpc.T_H
        series = analysis.FtleSeries(field, grid, T=float(T), cadence=_num(cfg, "corr_cadence"),
                                     quantile=_num(cfg, "corr_quantile"), icfg=icfg)
        rep = analysis.ridge_energy_correlation(traj, series)
        analysis.write_correlation_csvs(rep, os.path.join(out, "correlation.csv"),
                                        os.path.join(out, "correlation_summary.csv"))
        print(f"correlation: pearson={rep.pearson:.4g} mean_in={rep.mean_in:.6g} "
              f"mean_out={rep.mean_out:.6g} excluded={rep.excluded}")
    return 0


# --------------------------------------------------------------------------

def make_parser():
    parser = argparse.ArgumentParser(prog="flowmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (overrides the config's 'out')")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; VALUE is parsed as JSON when possible")

    common(sub.add_parser("ftle", help="forward and backward FTLE fields"))
    common(sub.add_parser("plan", help="closed-loop MPC trajectory"))
    common(sub.add_parser("sweep", help="(T_H, R/Q, omega) sweep with Pareto flags"))
    p = sub.add_parser("analyze", help="spectrum, histograms, orbit and FTLE correlation")
    common(p)
    p.add_argument("trajectory", help="trajectory CSV written by 'plan'")
    p.add_argument("--only", action="append", choices=ANALYSES,
                   help="run only this analysis (repeatable)")
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.out)
        if args.command == "ftle":
            return cmd_ftle(cfg)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_analyze(cfg, args.trajectory, args.only)
    except (ConfigError, SchemaError, OSError) as exc:
        print(f"flowmpc: error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, FtleError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"flowmpc: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
