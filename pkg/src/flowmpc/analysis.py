"""Experiment suite: parameter sweeps, Pareto fronts, energy spectra, orbit
detection, control/flow histograms and FTLE-ridge/energy correlation."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from ._csv import fmt, read_rows, write_rows
from .advect import GridSpec, IntegratorConfig
from .flowfield import DoubleGyre, DoubleGyreParams
from .ftle import ftle_at_many, ftle_field
from .mpc import MpcAbort, MpcConfig, run_mpc

__all__ = [
    "SweepRecord",
    "SpectrumResult",
    "OrbitSummary",
    "HistogramPair",
    "CorrelationReport",
    "FtleSeries",
    "log_spaced",
    "sweep",
    "run_sweep_point",
    "pareto_mask",
    "pareto_front",
    "energy_spectrum",
    "detect_orbit",
    "control_histograms",
    "ridge_energy_correlation",
    "spearman",
]

log = logging.getLogger(__name__)

DEFAULT_DISCARD = 0.4
DEFAULT_START = (2.0, 1.0)


@dataclass
class SweepRecord:
    T_H: float
    R_over_Q: float
    omega: float
    total_state_error: float
    total_energy: float
    weighted_J: float
    weighted_Je: float
    weighted_Ju: float
    run_duration: float
    converged_frac: float = 1.0
    failed: bool = False

    @property
    def key(self):
        return (self.T_H, self.R_over_Q, self.omega)


@dataclass
class SpectrumResult:
    freqs: np.ndarray  # rad / time
    magnitude: np.ndarray
    peaks: np.ndarray  # frequencies, largest magnitude first

    @property
    def bin_width(self):
        return float(self.freqs[1] - self.freqs[0])


@dataclass
class OrbitSummary:
    is_periodic: bool
    period: float
    mean_radius: float
    onset_time: float


@dataclass
class HistogramPair:
    quantity: str
    bins: np.ndarray  # edges, len(counts) + 1
    sensor_counts: np.ndarray
    flow_counts: np.ndarray


@dataclass
class CorrelationReport:
    pearson: float
    mean_in: float
    mean_out: float
    n_in: int
    n_out: int
    excluded: int
    times: np.ndarray
    sigma: np.ndarray
    energy: np.ndarray
    crossing: np.ndarray

    @property
    def ratio(self):
        return self.mean_in / self.mean_out if self.mean_out > 0 else math.inf


# --------------------------------------------------------------------------
# sweeps

def log_spaced(lo=1.0, hi=100.0, num=10):
    """Log-spaced ratios over ``[lo, hi]``; ``lo`` must be positive."""
    if lo <= 0:
        raise ValueError("log spacing needs a positive lower bound")
    return [float(v) for v in np.geomspace(lo, hi, num)]


def run_sweep_point(key, base_params, base_cfg, duration, x_start=DEFAULT_START,
                    icfg=IntegratorConfig()):
    """One MPC run at ``key = (T_H, R_over_Q, omega)`` with ``Q = 1``, ``R = R_over_Q``."""
    T_H, rq, omega = key
    if rq < 0:
        raise ValueError("R/Q must be non-negative")
    field = DoubleGyre(replace(base_params, omega=omega))
    cfg = replace(base_cfg, T_H=T_H, Q=1.0, R=rq)
    try:
        traj = run_mpc(field, x_start, 0.0, cfg, duration, icfg=icfg)
    except (MpcAbort, ValueError) as exc:
        log.warning("sweep point %s failed: %s", key, exc)
        nan = float("nan")
        return SweepRecord(T_H, rq, omega, nan, nan, nan, nan, nan, duration, 0.0, failed=True)
    err = traj.integrated_state_error(cfg.goal)
    energy = traj.integrated_energy()
    je = cfg.Q * err
    ju = cfg.R * energy
    return SweepRecord(
        T_H=T_H, R_over_Q=rq, omega=omega,
        total_state_error=err, total_energy=energy,
        weighted_J=je + ju, weighted_Je=je, weighted_Ju=ju,
        run_duration=float(traj.times[-1] - traj.times[0]),
        converged_frac=float(np.mean(traj.converged)),
    )


def _point(args):
    return run_sweep_point(*args)


def sweep(base_params=DoubleGyreParams(), base_cfg=MpcConfig(), T_H_list=(4.0,),
          R_over_Q_list=(2.0,), omega_list=None, duration=60.0, x_start=DEFAULT_START,
          icfg=IntegratorConfig(), skip=(), workers=1, on_record=None):
    """Run every ``(T_H, R/Q, omega)`` tuple in nested order and return the records.

    Keys in ``skip`` are not recomputed and do not appear in the result.
    ``on_record`` is called with each record as soon as it is available.
    """
    if omega_list is None:
        omega_list = (base_params.omega,)
    for rq in R_over_Q_list:
        if rq <= 0:
            raise ValueError("sweep R/Q values must be positive; run R/Q = 0 as a single case")
    skip = set(skip)
    keys = [k for k in itertools.product(T_H_list, R_over_Q_list, omega_list) if k not in skip]
    jobs = [(k, base_params, base_cfg, duration, tuple(x_start), icfg) for k in keys]
    records = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_point, jobs):
                records.append(rec)
                if on_record:
                    on_record(rec)
    else:
        for job in jobs:
            rec = _point(job)
            records.append(rec)
            if on_record:
                on_record(rec)
    return records


def pareto_mask(energy, error):
    """Boolean mask of points not dominated under joint minimisation; ties are kept."""
    e = np.asarray(energy, dtype=np.float64)
    s = np.asarray(error, dtype=np.float64)
    n = len(e)
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        dominated = (e <= e[i]) & (s <= s[i]) & ((e < e[i]) | (s < s[i]))
        if np.any(dominated):
            mask[i] = False
    return mask


def pareto_front(records):
    """Non-dominated subset of ``records`` (SweepRecords or ``(energy, error)`` pairs)."""
    records = list(records)
    if not records:
        raise ValueError("pareto_front needs at least one record")
    if isinstance(records[0], SweepRecord):
        records = [r for r in records if not r.failed]
        pts = [(r.total_energy, r.total_state_error) for r in records]
    else:
        pts = [tuple(r) for r in records]
    if not pts:
        return []
    e, s = zip(*pts)
    mask = pareto_mask(e, s)
    return [r for r, m in zip(records, mask) if m]


# --------------------------------------------------------------------------
# spectra and orbits

def _steady_slice(times, discard):
    t0, t1 = times[0], times[-1]
    if discard is None:
        discard = DEFAULT_DISCARD * (t1 - t0)
    return times >= t0 + discard - 1e-9


def energy_spectrum(traj, discard=None, min_samples=64):
    """Single-sided amplitude spectrum of the mean-removed instantaneous energy.

    ``discard`` is the initial transient (time units) to drop; by default the
    first 40% of the run. Frequencies are angular (rad per time unit).
    """
    t = traj.times[:-1]
    keep = _steady_slice(t, discard)
    e = np.asarray(traj.inst_energy, dtype=np.float64)[keep]
    return spectrum(e, traj.dt, min_samples=min_samples)


def spectrum(series, dt, min_samples=64):
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if n < min_samples:
        raise ValueError(f"series has {n} samples, need at least {min_samples}")
    x = x - x.mean()
    X = np.fft.rfft(x)
    mag = np.abs(X) / n
    mag[1:] *= 2.0
    if n % 2 == 0:
        mag[-1] /= 2.0
    freqs = 2 * np.pi * np.fft.rfftfreq(n, d=dt)

    floor = max(float(np.median(mag)), 1e-12 * max(1.0, float(np.max(np.abs(series)))))
    inner = mag[1:-1]
    is_peak = (inner > mag[:-2]) & (inner >= mag[2:]) & (inner > floor)
    idx = np.flatnonzero(is_peak) + 1
    idx = idx[np.argsort(-mag[idx], kind="stable")]
    return SpectrumResult(freqs=freqs, magnitude=mag, peaks=freqs[idx])


def _sample(times, states, at):
    return np.column_stack([np.interp(at, times, states[:, 0]),
                            np.interp(at, times, states[:, 1])])


def detect_orbit(traj, goal, ref_period, tol=0.02, multiples=(1, 2, 3)):
    """Stroboscopic periodic-orbit test at ``m * ref_period`` for each ``m``.

    Samples taken one candidate period apart over the final third of the run
    must agree within ``tol``. The onset is the earliest time after which the
    one-period recurrence distance stays below ``tol``.
    """
    times = np.asarray(traj.times, dtype=np.float64)
    states = np.asarray(traj.states, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    t0, t1 = times[0], times[-1]
    span = t1 - t0
    if span < 3 * ref_period - 1e-9:
        raise ValueError("trajectory shorter than three reference periods")
    for m in multiples:
        P = m * ref_period
        window = max(span / 3.0, P)
        q = int(math.floor(window / P + 1e-9))
        strobe = _sample(times, states, t1 - P * np.arange(q + 1))
        gaps = np.linalg.norm(np.diff(strobe, axis=0), axis=1)
        if not np.all(gaps < tol):
            continue
        # continuous recurrence distance for the onset
        base = times[times <= t1 - P + 1e-9]
        rec = np.linalg.norm(_sample(times, states, base + P) - _sample(times, states, base), axis=1)
        bad = np.flatnonzero(rec >= tol)
        if bad.size and bad[-1] + 1 >= len(base):
            continue
        onset = float(base[bad[-1] + 1]) if bad.size else float(base[0])
        if not onset < t1 - 2 * P:
            continue
        last = times >= t1 - P - 1e-9
        radius = float(np.mean(np.linalg.norm(states[last] - goal, axis=1)))
        return OrbitSummary(True, float(P), radius, onset)
    last = times >= t1 - ref_period - 1e-9
    radius = float(np.mean(np.linalg.norm(states[last] - goal, axis=1)))
    return OrbitSummary(False, float("nan"), radius, float("nan"))


# --------------------------------------------------------------------------
# histograms

def _flow_samples(traj, field):
    vel, _, p = field.kernel()
    xs = traj.states[:-1]
    ts = traj.times[:-1]
    return np.array([vel(float(x), float(y), float(t), p) for (x, y), t in zip(xs, ts)]).reshape(-1, 2)


def control_histograms(traj, field, bins=30):
    """Sensor-vs-flow histograms of magnitude, heading and both components.

    Magnitude compares ``|u|`` with ``|v|``; heading compares the orientation
    of ``dx/dt = v + u`` with that of ``v``; components compare ``u_x, u_y``
    with ``v_x, v_y``. The flow is sampled at the sensor's own ``(x, y, t)``.
    """
    u = np.asarray(traj.controls, dtype=np.float64).reshape(-1, 2)
    if len(u) == 0:
        raise ValueError("empty trajectory")
    v = _flow_samples(traj, field)
    w = v + u
    out = []

    def pair(name, a, b, lo, hi):
        if not hi > lo:
            lo, hi = lo - 0.5, lo + 0.5
        edges = np.linspace(lo, hi, bins + 1)
        ca, _ = np.histogram(a, edges)
        cb, _ = np.histogram(b, edges)
        out.append(HistogramPair(name, edges, ca, cb))

    um = np.hypot(u[:, 0], u[:, 1])
    vm = np.hypot(v[:, 0], v[:, 1])
    top = float(max(um.max(), vm.max()))
    pair("magnitude", um, vm, 0.0, top if top > 0 else 1.0)
    pair("heading", np.arctan2(w[:, 1], w[:, 0]), np.arctan2(v[:, 1], v[:, 0]), -np.pi, np.pi)
    for i, name in enumerate(("x", "y")):
        lim = float(max(np.abs(u[:, i]).max(), np.abs(v[:, i]).max()))
        pair(name, u[:, i], v[:, i], -lim, lim)
    return out


# --------------------------------------------------------------------------
# FTLE along a trajectory

class FtleSeries:
    """Forward FTLE fields computed on demand every ``cadence`` time units.

    Values between computed fields are interpolated linearly in time. The
    default horizon ``T = 4`` matches the default MPC prediction horizon.
    For time-periodic fields the cache key is the phase within one period, so a
    long run only ever computes one period's worth of fields.
    """

    def __init__(self, field, spec=None, T=4.0, cadence=0.5, quantile=0.9,
                 icfg=IntegratorConfig()):
        self.field = field
        self.spec = spec or GridSpec(0.0, 2.0, 0.0, 1.0, 101, 51)
        self.T = T
        self.cadence = cadence
        self.quantile = quantile
        self.icfg = icfg
        self._cache = {}

    def _key(self, t):
        P = self.field.period
        if P:
            t = math.fmod(t, P)
            if t < 0:
                t += P
            if abs(t - P) < 1e-9:
                t = 0.0
        return round(t, 9)

    def at(self, t):
        """``(FtleField, threshold)`` for flow time ``t``."""
        key = self._key(t)
        hit = self._cache.get(key)
        if hit is None:
            f = ftle_field(self.field, self.spec, t, self.T, self.icfg)
            thr = float(np.quantile(f.defined, self.quantile))
            hit = self._cache[key] = (f, thr)
        return hit

    def sample(self, t, x):
        """Time-interpolated ``(sigma, threshold)`` at position ``x``; NaN outside the grid."""
        n = math.floor(t / self.cadence + 1e-9)
        ta = n * self.cadence
        w = (t - ta) / self.cadence
        fa, thra = self.at(ta)
        sa = float(ftle_at_many(fa, [x[0]], [x[1]])[0])
        if w < 1e-9:
            return sa, thra
        fb, thrb = self.at(ta + self.cadence)
        sb = float(ftle_at_many(fb, [x[0]], [x[1]])[0])
        return (1 - w) * sa + w * sb, (1 - w) * thra + w * thrb


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2:
        return 0.0
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den <= 1e-300 or np.ptp(a) <= 1e-15 * max(1.0, np.max(np.abs(a))) \
            or np.ptp(b) <= 1e-15 * max(1.0, np.max(np.abs(b))):
        return 0.0
    return float(da @ db / den)


def ridge_energy_correlation(traj, ftle, quantile=None):
    """Correlate forward-FTLE at the sensor with its instantaneous energy.

    ``ftle`` is an :class:`FtleSeries` or any callable ``(t, x) -> (sigma,
    threshold)``. Steps where sigma is undefined are excluded and counted.
    A step is a ridge crossing when sigma is at or above the field's
    threshold.
    """
    if quantile is not None and isinstance(ftle, FtleSeries):
        ftle.quantile = quantile
    sample = ftle.sample if isinstance(ftle, FtleSeries) else ftle
    ts = np.asarray(traj.times[:-1])
    xs = np.asarray(traj.states[:-1])
    sig = np.empty(len(ts))
    thr = np.empty(len(ts))
    for k, (t, x) in enumerate(zip(ts, xs)):
        sig[k], thr[k] = sample(float(t), x)
    e = np.asarray(traj.inst_energy, dtype=np.float64)
    ok = np.isfinite(sig)
    crossing = ok & (sig >= thr)
    inside = e[crossing]
    outside = e[ok & ~crossing]
    return CorrelationReport(
        pearson=_pearson(sig[ok], e[ok]),
        mean_in=float(inside.mean()) if inside.size else float("nan"),
        mean_out=float(outside.mean()) if outside.size else float("nan"),
        n_in=int(inside.size), n_out=int(outside.size), excluded=int((~ok).sum()),
        times=ts, sigma=sig, energy=e, crossing=crossing,
    )


def spearman(a, b):
    """Spearman rank correlation (average ranks for ties)."""
    return float(spearmanr(a, b).statistic)


# --------------------------------------------------------------------------
# CSV outputs

SWEEP_COLUMNS = ("T_H", "R_over_Q", "omega", "total_state_error", "total_energy", "weighted_J",
                 "weighted_Je", "weighted_Ju", "converged_frac", "pareto")


def pareto_flags(records):
    """Pareto membership of each record within its own ``(T_H, omega)`` group."""
    flags = [False] * len(records)
    groups = {}
    for n, r in enumerate(records):
        if not r.failed:
            groups.setdefault((r.T_H, r.omega), []).append(n)
    for idx in groups.values():
        mask = pareto_mask([records[n].total_energy for n in idx],
                           [records[n].total_state_error for n in idx])
        for n, m in zip(idx, mask):
            flags[n] = bool(m)
    return flags


def write_sweep_csv(records, path):
    flags = pareto_flags(records)
    rows = [(r.T_H, r.R_over_Q, r.omega, r.total_state_error, r.total_energy, r.weighted_J,
             r.weighted_Je, r.weighted_Ju, r.converged_frac, f) for r, f in zip(records, flags)]
    write_rows(path, SWEEP_COLUMNS, rows)


def append_sweep_row(record, path):
    """Append one record (Pareto flag pending) so an interrupted sweep can resume."""
    with open(path, "a", newline="") as fh:
        fh.write(",".join(fmt(v) for v in (
            record.T_H, record.R_over_Q, record.omega, record.total_state_error,
            record.total_energy, record.weighted_J, record.weighted_Je, record.weighted_Ju,
            record.converged_frac, False)) + "\n")


def read_sweep_csv(path):
    records = []
    for r in read_rows(path, SWEEP_COLUMNS):
        v = [float(x) for x in r[:9]]
        failed = not math.isfinite(v[4])
        records.append(SweepRecord(T_H=v[0], R_over_Q=v[1], omega=v[2], total_state_error=v[3],
                                   total_energy=v[4], weighted_J=v[5], weighted_Je=v[6],
                                   weighted_Ju=v[7], run_duration=float("nan"),
                                   converged_frac=v[8], failed=failed))
    return records


def write_spectrum_csv(spec, path):
    write_rows(path, ("freq", "magnitude"), zip(spec.freqs, spec.magnitude))


def write_peaks_csv(spec, path):
    mags = [spec.magnitude[np.argmin(np.abs(spec.freqs - f))] for f in spec.peaks]
    write_rows(path, ("freq", "magnitude"), zip(spec.peaks, mags))


def write_histogram_csvs(pairs, directory, prefix="hist"):
    """Two files per histogram: sensor and flow counts against bin centres."""
    paths = []
    for h in pairs:
        centres = 0.5 * (h.bins[:-1] + h.bins[1:])
        for series, counts in (("sensor", h.sensor_counts), ("flow", h.flow_counts)):
            path = f"{directory}/{prefix}_{h.quantity}_{series}.csv"
            write_rows(path, ("bin_center", "count"), ((c, int(n)) for c, n in zip(centres, counts)))
            paths.append(path)
    return paths


def write_orbit_csv(orbit, path):
    write_rows(path, ("is_periodic", "period", "mean_radius", "onset_time"),
               [(orbit.is_periodic, orbit.period, orbit.mean_radius, orbit.onset_time)])


def write_correlation_csvs(report, path, summary_path):
    write_rows(path, ("t", "sigma", "inst_energy", "crossing"),
               zip(report.times, report.sigma, report.energy, (bool(c) for c in report.crossing)))
    write_rows(summary_path, ("pearson", "mean_in", "mean_out", "n_in", "n_out", "excluded"),
               [(report.pearson, report.mean_in, report.mean_out, report.n_in, report.n_out,
                 report.excluded)])
