"""Fixed-step RK4 advection of drifters and flow maps on rectangular grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "IntegrationError",
    "IntegratorConfig",
    "GridSpec",
    "FlowMapGrid",
    "step",
    "advect_point",
    "flow_map",
    "substeps",
]


class IntegrationError(RuntimeError):
    """A drifter left the finite reals; ``x`` and ``t`` locate the failure."""

    def __init__(self, message, x=None, t=None, node=None):
        super().__init__(message)
        self.x = x
        self.t = t
        self.node = node


@dataclass(frozen=True)
class IntegratorConfig:
    dt_int: float = 0.01
    scheme: str = "rk4"

    def __post_init__(self):
        if not (self.dt_int > 0 and math.isfinite(self.dt_int)):
            raise ValueError(f"dt_int must be positive, got {self.dt_int}")
        if self.scheme != "rk4":
            raise ValueError(f"unsupported integration scheme {self.scheme!r}")


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid bounds must satisfy max > min")

    @property
    def xs(self):
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self):
        return np.linspace(self.y_min, self.y_max, self.ny)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dy(self):
        return (self.y_max - self.y_min) / (self.ny - 1)

    def nodes(self):
        """Initial node positions, shape ``(ny, nx, 2)``; node ``(i, j)`` is ``[j, i]``."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X, Y], axis=-1)


@dataclass(frozen=True)
class FlowMapGrid:
    spec: GridSpec
    t0: float
    T: float
    positions: np.ndarray  # (ny, nx, 2)

    @property
    def initial(self):
        return self.spec.nodes()


def substeps(duration, dt_int):
    """Split ``|duration|`` into full ``dt_int`` steps plus one partial remainder."""
    span = abs(duration)
    ratio = span / dt_int
    n = int(round(ratio))
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        n = int(math.floor(ratio))
    rem = span - n * dt_int
    hs = [dt_int] * n
    if rem > 1e-12 * max(1.0, span):
        hs.append(rem)
    return np.array(hs, dtype=np.float64)


@numba.njit
def _rk4(vel, p, x, y, t, h, ux, uy):
    k1x, k1y = vel(x, y, t, p)
    k1x += ux
    k1y += uy
    k2x, k2y = vel(x + 0.5 * h * k1x, y + 0.5 * h * k1y, t + 0.5 * h, p)
    k2x += ux
    k2y += uy
    k3x, k3y = vel(x + 0.5 * h * k2x, y + 0.5 * h * k2y, t + 0.5 * h, p)
    k3x += ux
    k3y += uy
    k4x, k4y = vel(x + h * k3x, y + h * k3y, t + h, p)
    k4x += ux
    k4y += uy
    return (x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
            y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y))


@numba.njit
def _advect_many(vel, p, xs, ys, t0, hs, sign, out, fail_t):
    """Advect each ``(xs[n], ys[n])``; ``fail_t[n]`` is NaN unless the node blew up."""
    for n in range(xs.shape[0]):
        x = xs[n]
        y = ys[n]
        fail_t[n] = np.nan
        for k in range(hs.shape[0]):
            # every step but the last has length hs[0]
            t = t0 + sign * k * hs[0]
            h = sign * hs[k]
            xn, yn = _rk4(vel, p, x, y, t, h, 0.0, 0.0)
            if not (math.isfinite(xn) and math.isfinite(yn)):
                fail_t[n] = t
                break
            x = xn
            y = yn
        out[n, 0] = x
        out[n, 1] = y


def step(field, x, t, dt):
    """One RK4 update of ``dx/dt = v(x, t)``; negative ``dt`` integrates backward."""
    if dt == 0 or not math.isfinite(dt):
        raise ValueError("dt must be non-zero and finite")
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and math.isfinite(t)):
        raise ValueError("non-finite state or time")
    vel, _, p = field.kernel()
    xn = np.array(_rk4(vel, p, x[0], x[1], float(t), float(dt), 0.0, 0.0))
    if not np.all(np.isfinite(xn)):
        raise IntegrationError(f"non-finite RK4 update at x={x.tolist()}, t={t}", x=x, t=t)
    return xn


def _advect_array(field, pts, t0, T, cfg):
    if T == 0 or not math.isfinite(T):
        raise ValueError("advection horizon must be non-zero and finite")
    if abs(T) < cfg.dt_int:
        raise ValueError(f"|T|={abs(T)} shorter than dt_int={cfg.dt_int}")
    vel, _, p = field.kernel()
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    hs = substeps(T, cfg.dt_int)
    out = np.empty_like(pts)
    fail_t = np.empty(pts.shape[0])
    _advect_many(vel, p, pts[:, 0].copy(), pts[:, 1].copy(), float(t0), hs,
                 1.0 if T > 0 else -1.0, out, fail_t)
    return out, fail_t


def advect_point(field, x0, t0, T, cfg=IntegratorConfig()):
    """Flow map of a single drifter from ``t0`` to ``t0 + T``."""
    out, fail_t = _advect_array(field, np.asarray(x0, dtype=np.float64), t0, T, cfg)
    if np.isfinite(fail_t[0]):
        raise IntegrationError(f"drifter diverged at x={out[0].tolist()}, t={fail_t[0]}",
                               x=out[0].copy(), t=float(fail_t[0]))
    return out[0]


def flow_map(field, spec, t0, T, cfg=IntegratorConfig()):
    """Advect every node of ``spec`` independently; node order is preserved."""
    nodes = spec.nodes()
    out, fail_t = _advect_array(field, nodes.reshape(-1, 2), t0, T, cfg)
    bad = np.flatnonzero(np.isfinite(fail_t))
    if bad.size:
        n = int(bad[0])
        j, i = divmod(n, spec.nx)
        raise IntegrationError(f"node (i={i}, j={j}) diverged at t={fail_t[n]}",
                               x=out[n].copy(), t=float(fail_t[n]), node=(i, j))
    return FlowMapGrid(spec=spec, t0=float(t0), T=float(T), positions=out.reshape(spec.ny, spec.nx, 2))
