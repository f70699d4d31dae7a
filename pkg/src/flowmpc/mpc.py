"""Finite-horizon MPC of a kinematic sensor ``dx/dt = v(x, t) + u`` in a flow field.

Single shooting with piecewise-constant controls on the ``dt`` grid. The cost
gradient is the discrete adjoint of the RK4 rollout, so it matches finite
differences of :func:`cost` to rounding error. Horizons are solved by a
projected L-BFGS method over the control box.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numba
import numpy as np

from ._csv import SchemaError, parse_bool, read_rows, write_rows
from .advect import IntegrationError, IntegratorConfig, _rk4, substeps

__all__ = [
    "SolverError",
    "SolverConfig",
    "MpcConfig",
    "ControlSequence",
    "HorizonSolution",
    "Trajectory",
    "MpcAbort",
    "rollout",
    "cost",
    "cost_gradient",
    "solve_horizon",
    "run_mpc",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

log = logging.getLogger(__name__)


class SolverError(ArithmeticError):
    """Non-finite cost encountered while searching."""


class MpcAbort(RuntimeError):
    """A receding-horizon run failed; ``trajectory`` holds the steps completed so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class SolverConfig:
    tol_g: float = 1e-6
    max_iter: int = 500
    memory: int = 10
    armijo: float = 1e-4
    max_backtracks: int = 40


@dataclass(frozen=True)
class MpcConfig:
    T_H: float = 4.0
    dt: float = 0.1
    Q: float = 1.0
    R: float = 2.0
    Q2: float = 0.0
    u_max: float = 0.1
    goal: tuple = (0.5, 0.5)
    solver: SolverConfig = dc_field(default_factory=SolverConfig)

    def __post_init__(self):
        if not (self.T_H > 0 and self.dt > 0):
            raise ValueError("T_H and dt must be positive")
        ratio = self.T_H / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"T_H/dt must be a positive integer, got {ratio}")
        if min(self.Q, self.R, self.Q2) < 0:
            raise ValueError("weights must be non-negative")
        if self.Q == 0 and self.R == 0 and self.Q2 == 0:
            raise ValueError("at least one weight must be positive")
        # u_max = 0 is allowed as the passive-drifter limit
        if not self.u_max >= 0:
            raise ValueError("u_max must be non-negative")
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))

    @property
    def N(self):
        return int(round(self.T_H / self.dt))


@dataclass
class ControlSequence:
    u: np.ndarray  # (N, 2)
    t0: float = 0.0

    def __len__(self):
        return len(self.u)

    def shifted(self):
        """Drop the first control and repeat the last one (warm start for the next step)."""
        return ControlSequence(np.vstack([self.u[1:], self.u[-1:]]), self.t0)


@dataclass
class HorizonSolution:
    controls: ControlSequence
    predicted: np.ndarray  # (N+1, 2)
    J: float
    J_e: float
    J_u: float
    J_terminal: float
    iterations: int
    converged: bool
    evaluations: int = 0
    history: list = dc_field(default_factory=list, repr=False)


@dataclass
class Trajectory:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, 2)
    controls: np.ndarray  # (K, 2)
    inst_energy: np.ndarray  # (K,)
    J_pred: np.ndarray = None
    Je_pred: np.ndarray = None
    Ju_pred: np.ndarray = None
    converged: np.ndarray = None
    iterations: np.ndarray = None

    def __len__(self):
        return len(self.states)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def integrated_energy(self):
        return float(np.sum(self.inst_energy) * self.dt)

    def integrated_state_error(self, goal):
        e = self.states[1:] - np.asarray(goal)
        return float(np.sum(e * e) * self.dt)


# --------------------------------------------------------------------------
# compiled rollout / adjoint

@numba.njit
def _rollout_kernel(vel, p, x0, y0, t0, u, dt, hs, states):
    N = u.shape[0]
    x = x0
    y = y0
    states[0, 0] = x
    states[0, 1] = y
    for k in range(N):
        tk = t0 + k * dt
        for m in range(hs.shape[0]):
            x, y = _rk4(vel, p, x, y, tk + m * hs[0], hs[m], u[k, 0], u[k, 1])
        states[k + 1, 0] = x
        states[k + 1, 1] = y


@numba.njit
def _cost_kernel(states, u, gx, gy, Q, R, Q2, dt):
    N = u.shape[0]
    je = 0.0
    ju = 0.0
    for k in range(N):
        ex = states[k + 1, 0] - gx
        ey = states[k + 1, 1] - gy
        je += Q * (ex * ex + ey * ey) * dt
        ju += R * (u[k, 0] * u[k, 0] + u[k, 1] * u[k, 1]) * dt
    ex = states[N, 0] - gx
    ey = states[N, 1] - gy
    return je, ju, Q2 * (ex * ex + ey * ey)


@numba.njit
def _adjoint_kernel(vel, grad, p, t0, u, dt, hs, states, gx, gy, Q, R, Q2, G):
    """Reverse sweep through every RK4 substep; writes dJ/du into ``G``."""
    N = u.shape[0]
    M = hs.shape[0]
    sub = np.empty((M, 2))
    lx = 2.0 * Q2 * (states[N, 0] - gx)
    ly = 2.0 * Q2 * (states[N, 1] - gy)
    for k in range(N - 1, -1, -1):
        lx += 2.0 * Q * dt * (states[k + 1, 0] - gx)
        ly += 2.0 * Q * dt * (states[k + 1, 1] - gy)
        ux = u[k, 0]
        uy = u[k, 1]
        tk = t0 + k * dt
        # replay the interval to recover substep start states
        x = states[k, 0]
        y = states[k, 1]
        for m in range(M):
            sub[m, 0] = x
            sub[m, 1] = y
            x, y = _rk4(vel, p, x, y, tk + m * hs[0], hs[m], ux, uy)
        bux = 0.0
        buy = 0.0
        for m in range(M - 1, -1, -1):
            h = hs[m]
            t = tk + m * hs[0]
            x = sub[m, 0]
            y = sub[m, 1]
            k1x, k1y = vel(x, y, t, p)
            k1x += ux
            k1y += uy
            s2x = x + 0.5 * h * k1x
            s2y = y + 0.5 * h * k1y
            k2x, k2y = vel(s2x, s2y, t + 0.5 * h, p)
            k2x += ux
            k2y += uy
            s3x = x + 0.5 * h * k2x
            s3y = y + 0.5 * h * k2y
            k3x, k3y = vel(s3x, s3y, t + 0.5 * h, p)
            k3x += ux
            k3y += uy
            s4x = x + h * k3x
            s4y = y + h * k3y

            b1x = h / 6.0 * lx
            b1y = h / 6.0 * ly
            b2x = h / 3.0 * lx
            b2y = h / 3.0 * ly
            b3x = b2x
            b3y = b2y
            b4x = b1x
            b4y = b1y
            bx = lx
            by = ly
            # stage 4
            a11, a12, a21, a22 = grad(s4x, s4y, t + h, p)
            gsx = a11 * b4x + a21 * b4y
            gsy = a12 * b4x + a22 * b4y
            bux += b4x
            buy += b4y
            bx += gsx
            by += gsy
            b3x += h * gsx
            b3y += h * gsy
            # stage 3
            a11, a12, a21, a22 = grad(s3x, s3y, t + 0.5 * h, p)
            gsx = a11 * b3x + a21 * b3y
            gsy = a12 * b3x + a22 * b3y
            bux += b3x
            buy += b3y
            bx += gsx
            by += gsy
            b2x += 0.5 * h * gsx
            b2y += 0.5 * h * gsy
            # stage 2
            a11, a12, a21, a22 = grad(s2x, s2y, t + 0.5 * h, p)
            gsx = a11 * b2x + a21 * b2y
            gsy = a12 * b2x + a22 * b2y
            bux += b2x
            buy += b2y
            bx += gsx
            by += gsy
            b1x += 0.5 * h * gsx
            b1y += 0.5 * h * gsy
            # stage 1
            a11, a12, a21, a22 = grad(x, y, t, p)
            bux += b1x
            buy += b1y
            bx += a11 * b1x + a21 * b1y
            by += a12 * b1x + a22 * b1y
            lx = bx
            ly = by
        G[k, 0] = bux + 2.0 * R * dt * ux
        G[k, 1] = buy + 2.0 * R * dt * uy


class _Problem:
    """One horizon: fixed start, time and config; evaluates J and dJ/du."""

    def __init__(self, field, x0, t0, cfg, icfg):
        self.vel, self.grad, self.p = field.kernel()
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.t0 = float(t0)
        self.cfg = cfg
        self.hs = substeps(cfg.dt, icfg.dt_int)
        self.gx, self.gy = cfg.goal
        self.evaluations = 0

    def states(self, u):
        u = np.ascontiguousarray(u, dtype=np.float64).reshape(-1, 2)
        out = np.empty((u.shape[0] + 1, 2))
        _rollout_kernel(self.vel, self.p, self.x0[0], self.x0[1], self.t0, u,
                        self.cfg.dt, self.hs, out)
        if not np.all(np.isfinite(out)):
            k = int(np.argmax(~np.all(np.isfinite(out), axis=1)))
            raise IntegrationError(f"rollout diverged in control interval {k - 1}",
                                   x=out[k - 1].copy(), t=self.t0 + (k - 1) * self.cfg.dt)
        return out

    def cost(self, u):
        self.evaluations += 1
        u = np.ascontiguousarray(u, dtype=np.float64).reshape(-1, 2)
        X = self.states(u)
        c = self.cfg
        je, ju, jt = _cost_kernel(X, u, self.gx, self.gy, c.Q, c.R, c.Q2, c.dt)
        return je + ju + jt, je, ju, jt, X

    def gradient(self, u, X):
        u = np.ascontiguousarray(u, dtype=np.float64).reshape(-1, 2)
        G = np.empty_like(u)
        c = self.cfg
        _adjoint_kernel(self.vel, self.grad, self.p, self.t0, u, c.dt, self.hs, X,
                        self.gx, self.gy, c.Q, c.R, c.Q2, G)
        return G


def _as_controls(seq):
    u = seq.u if isinstance(seq, ControlSequence) else seq
    return np.asarray(u, dtype=np.float64).reshape(-1, 2)


def rollout(field, x0, seq, cfg, icfg=IntegratorConfig(), t0=None):
    """States ``x_0 .. x_N`` under piecewise-constant controls, shape ``(N+1, 2)``."""
    t0 = seq.t0 if t0 is None and isinstance(seq, ControlSequence) else (t0 or 0.0)
    return _Problem(field, x0, t0, cfg, icfg).states(_as_controls(seq))


def cost(field, x0, seq, cfg, icfg=IntegratorConfig(), t0=None):
    """``(J, J_e, J_u)``; the terminal term is folded into ``J``."""
    t0 = seq.t0 if t0 is None and isinstance(seq, ControlSequence) else (t0 or 0.0)
    J, je, ju, _, _ = _Problem(field, x0, t0, cfg, icfg).cost(_as_controls(seq))
    return J, je, ju


def cost_gradient(field, x0, seq, cfg, icfg=IntegratorConfig(), t0=None):
    """``dJ/du`` by the discrete adjoint of the rollout, shape ``(N, 2)``."""
    t0 = seq.t0 if t0 is None and isinstance(seq, ControlSequence) else (t0 or 0.0)
    prob = _Problem(field, x0, t0, cfg, icfg)
    u = _as_controls(seq)
    _, _, _, _, X = prob.cost(u)
    return prob.gradient(u, X)


# --------------------------------------------------------------------------
# projected L-BFGS

def _projected_gradient(z, g, lo, hi):
    return np.clip(z - g, lo, hi) - z


def _lbfgs_direction(g, S, Y, free):
    """Two-loop recursion restricted to the free variables."""
    q = np.where(free, g, 0.0)
    alphas = []
    rhos = []
    for s, y in zip(reversed(S), reversed(Y)):
        sf, yf = s * free, y * free
        sy = sf @ yf
        if sy <= 1e-16:
            alphas.append(0.0)
            rhos.append(0.0)
            continue
        rho = 1.0 / sy
        a = rho * (sf @ q)
        q = q - a * yf
        alphas.append(a)
        rhos.append(rho)
    if S:
        sf, yf = S[-1] * free, Y[-1] * free
        yy = yf @ yf
        gamma = (sf @ yf) / yy if yy > 0 and sf @ yf > 0 else 1.0
    else:
        gamma = 1.0
    r = gamma * q
    for (s, y), a, rho in zip(zip(S, Y), reversed(alphas), reversed(rhos)):
        if rho == 0.0:
            continue
        b = rho * ((y * free) @ r)
        r = r + (s * free) * (a - b)
    return -r


def _minimize_box(fun, z0, bound, sc):
    """Minimise ``fun(z) -> (f, aux)`` over ``[-bound, bound]^n`` given ``grad(z, aux)``.

    ``fun`` is a pair ``(value, gradient)`` of callables. Returns the best
    iterate, its value and aux data, iteration count, convergence flag and
    the accepted-value history.
    """
    value, gradient = fun
    lo, hi = -bound, bound
    z = np.clip(z0, lo, hi)
    f, aux = value(z)
    g = gradient(z, aux)
    S, Y = [], []
    history = [f]
    converged = False
    it = 0
    scale = bound if bound > 0 else 1.0
    while True:
        pg = _projected_gradient(z, g, lo, hi)
        if np.max(np.abs(pg), initial=0.0) <= sc.tol_g:
            converged = True
            break
        if it >= sc.max_iter:
            break
        it += 1
        at_lo = (z <= lo) & (g > 0)
        at_hi = (z >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        d = _lbfgs_direction(g, S, Y, free.astype(np.float64))
        if not S:
            # first step: move at most one box half-width
            gmax = np.max(np.abs(d))
            if gmax > 0:
                d = d * min(1.0, scale / gmax)
        slope = g @ d
        if not slope < 0:
            S.clear()
            Y.clear()
            d = np.where(free, -g, 0.0)
            gmax = np.max(np.abs(d))
            d = d * min(1.0, scale / gmax)
            slope = g @ d
        alpha = 1.0
        accepted = False
        for _ in range(sc.max_backtracks):
            zn = np.clip(z + alpha * d, lo, hi)
            fn, auxn = value(zn)
            if not math.isfinite(fn):
                raise SolverError(f"non-finite cost {fn} during line search")
            if fn <= f + sc.armijo * (g @ (zn - z)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if S:
                # stale curvature pairs; retry from steepest descent
                S.clear()
                Y.clear()
                continue
            break
        gn = gradient(zn, auxn)
        s = zn - z
        y = gn - g
        if s @ y > 1e-12 * (s @ s):
            S.append(s)
            Y.append(y)
            if len(S) > sc.memory:
                S.pop(0)
                Y.pop(0)
        z, f, aux, g = zn, fn, auxn, gn
        history.append(f)
    return z, f, aux, it, converged, history


def solve_horizon(field, x0, t0, cfg, warm=None, icfg=IntegratorConfig()):
    """Locally optimal controls for the horizon starting at ``(x0, t0)``.

    Cold starts initialise at ``u = 0``; ``warm`` supplies the initial guess.
    Hitting ``max_iter`` is reported through ``converged=False``, not raised.
    """
    prob = _Problem(field, x0, t0, cfg, icfg)
    N = cfg.N
    if warm is None:
        z0 = np.zeros(2 * N)
    else:
        z0 = _as_controls(warm).ravel().copy()
        if z0.size != 2 * N:
            raise ValueError(f"warm start has {z0.size // 2} controls, horizon needs {N}")

    def value(z):
        J, je, ju, jt, X = prob.cost(z)
        if not math.isfinite(J):
            raise SolverError(f"non-finite cost {J}")
        return J, (je, ju, jt, X)

    def gradient(z, aux):
        return prob.gradient(z, aux[3]).ravel()

    if cfg.u_max == 0:
        # the box is a single point
        z = np.zeros(2 * N)
        J, aux = value(z)
        it, conv, hist = 0, True, [J]
    else:
        z, J, aux, it, conv, hist = _minimize_box((value, gradient), z0, cfg.u_max, cfg.solver)
    je, ju, jt, X = aux
    return HorizonSolution(
        controls=ControlSequence(z.reshape(N, 2).copy(), float(t0)),
        predicted=X, J=J, J_e=je, J_u=ju, J_terminal=jt,
        iterations=it, converged=conv, evaluations=prob.evaluations, history=hist,
    )


def run_mpc(field, x_start, t_start, cfg, duration, icfg=IntegratorConfig(), warm_start=True,
            callback=None):
    """Receding-horizon loop: solve, apply the first control for one ``dt``, repeat."""
    if duration < cfg.dt:
        raise ValueError("duration must cover at least one control step")
    steps = int(round(duration / cfg.dt))
    if abs(steps * cfg.dt - duration) > 1e-9 * max(1.0, duration):
        steps = int(math.floor(duration / cfg.dt))
    one_step = MpcConfig(T_H=cfg.dt, dt=cfg.dt, Q=cfg.Q, R=cfg.R, Q2=cfg.Q2,
                         u_max=cfg.u_max, goal=cfg.goal, solver=cfg.solver)

    times = [float(t_start)]
    states = [np.asarray(x_start, dtype=np.float64).copy()]
    controls, energy, jp, jep, jup, conv, iters = [], [], [], [], [], [], []

    def partial():
        return _trajectory(times, states, controls, energy, jp, jep, jup, conv, iters)

    warm = None
    for k in range(steps):
        t = float(t_start) + k * cfg.dt
        try:
            sol = solve_horizon(field, states[-1], t, cfg, warm=warm, icfg=icfg)
            u0 = sol.controls.u[0].copy()
            x_next = rollout(field, states[-1], u0[None, :], one_step, icfg, t0=t)[1]
        except (SolverError, IntegrationError) as exc:
            raise MpcAbort(f"MPC aborted at t={t}: {exc}", partial()) from exc
        times.append(float(t_start) + (k + 1) * cfg.dt)
        states.append(x_next)
        controls.append(u0)
        energy.append(float(u0 @ u0))
        jp.append(sol.J)
        jep.append(sol.J_e)
        jup.append(sol.J_u)
        conv.append(sol.converged)
        iters.append(sol.iterations)
        if warm_start:
            warm = sol.controls.shifted()
        if callback is not None:
            callback(k, sol)
        if not sol.converged:
            log.debug("horizon at t=%.3f stopped after %d iterations", t, sol.iterations)
    return partial()


def _trajectory(times, states, controls, energy, jp, jep, jup, conv, iters):
    return Trajectory(
        times=np.array(times),
        states=np.array(states).reshape(-1, 2),
        controls=np.array(controls).reshape(-1, 2),
        inst_energy=np.array(energy),
        J_pred=np.array(jp),
        Je_pred=np.array(jep),
        Ju_pred=np.array(jup),
        converged=np.array(conv, dtype=bool),
        iterations=np.array(iters, dtype=int),
    )


TRAJECTORY_COLUMNS = ("t", "x", "y", "ux", "uy", "inst_energy", "J_pred", "Je_pred", "Ju_pred",
                      "converged")


def write_trajectory_csv(traj, path):
    """One row per state; the final state's control columns are left blank."""
    K = len(traj.controls)
    rows = []
    for k in range(K + 1):
        t = traj.times[k]
        x, y = traj.states[k]
        if k < K:
            ux, uy = traj.controls[k]
            rows.append((t, x, y, ux, uy, traj.inst_energy[k], traj.J_pred[k], traj.Je_pred[k],
                         traj.Ju_pred[k], bool(traj.converged[k])))
        else:
            rows.append((t, x, y, None, None, None, None, None, None, None))
    write_rows(path, TRAJECTORY_COLUMNS, rows)


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`; raises ``SchemaError`` on a bad header."""
    rows = read_rows(path, TRAJECTORY_COLUMNS)
    if len(rows) < 2:
        raise SchemaError(f"{path}: a trajectory needs at least two rows")
    try:
        times = np.array([float(r[0]) for r in rows])
        states = np.array([[float(r[1]), float(r[2])] for r in rows])
        body = rows[:-1]
        controls = np.array([[float(r[3]), float(r[4])] for r in body])
        cols = [np.array([float(r[i]) for r in body]) for i in (5, 6, 7, 8)]
        conv = np.array([parse_bool(r[9]) for r in body], dtype=bool)
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: malformed trajectory row ({exc})") from exc
    return Trajectory(times=times, states=states, controls=controls, inst_energy=cols[0],
                      J_pred=cols[1], Je_pred=cols[2], Ju_pred=cols[3], converged=conv)
