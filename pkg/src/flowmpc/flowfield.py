"""Time-varying 2-D velocity fields.

Every field exposes a scalar Python API (``velocity``, ``velocity_gradient``)
and a pair of numba-compiled point kernels used by the integrators::

    vel(x, y, t, p)  -> (vx, vy)
    grad(x, y, t, p) -> (dvx/dx, dvx/dy, dvy/dx, dvy/dy)

where ``p`` is a float64 parameter array owned by the field. Custom fields
subclass :class:`FlowField` and return their own compiled kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

__all__ = [
    "DomainError",
    "DoubleGyreParams",
    "FlowField",
    "DoubleGyre",
    "Uniform",
    "LinearSaddle",
    "TimeReversed",
    "stream_function",
    "velocity",
    "max_speed",
]


class DomainError(ValueError):
    """Raised when a field is queried with non-finite coordinates."""


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DomainError(f"non-finite field query: {values!r}")


@dataclass(frozen=True)
class DoubleGyreParams:
    """Amplitude ``A``, oscillation magnitude ``epsilon`` and angular frequency ``omega``."""

    A: float = 0.1
    epsilon: float = 0.25
    omega: float = 2 * math.pi / 10

    def __post_init__(self):
        for name in ("A", "epsilon", "omega"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        # A = 0 is accepted as the null field used throughout the tests.
        if self.A < 0:
            raise ValueError(f"A must be non-negative, got {self.A}")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.omega < 0:
            raise ValueError(f"omega must be non-negative, got {self.omega}")

    @property
    def period(self):
        return 2 * math.pi / self.omega if self.omega > 0 else None

    def as_array(self):
        return np.array([self.A, self.epsilon, self.omega], dtype=np.float64)


# --------------------------------------------------------------------------
# double gyre kernels

@numba.njit(cache=True)
def _gyre_f(x, t, eps, omega):
    s = math.sin(omega * t)
    a = eps * s
    b = 1.0 - 2.0 * eps * s
    return a * x * x + b * x, 2.0 * a * x + b, 2.0 * a


@numba.njit(cache=True)
def _gyre_vel(x, y, t, p):
    A = p[0]
    f, fx, _ = _gyre_f(x, t, p[1], p[2])
    pf = math.pi * f
    py = math.pi * y
    vx = -math.pi * A * math.sin(pf) * math.cos(py)
    vy = math.pi * A * math.cos(pf) * math.sin(py) * fx
    return vx, vy


@numba.njit(cache=True)
def _gyre_grad(x, y, t, p):
    A = p[0]
    f, fx, fxx = _gyre_f(x, t, p[1], p[2])
    sf = math.sin(math.pi * f)
    cf = math.cos(math.pi * f)
    sy = math.sin(math.pi * y)
    cy = math.cos(math.pi * y)
    pi2A = math.pi * math.pi * A
    a11 = -pi2A * cf * fx * cy
    a12 = pi2A * sf * sy
    a21 = -pi2A * sf * fx * fx * sy + math.pi * A * cf * sy * fxx
    a22 = pi2A * cf * cy * fx
    return a11, a12, a21, a22


def stream_function(x, y, t, params=DoubleGyreParams()):
    """Double gyre stream function ``A sin(pi f(x, t)) sin(pi y)``."""
    _check_finite(x, y, t)
    f, _, _ = _gyre_f(float(x), float(t), params.epsilon, params.omega)
    return params.A * math.sin(math.pi * f) * math.sin(math.pi * y)


def velocity(x, y, t, params=DoubleGyreParams()):
    """Double gyre velocity ``(-dphi/dy, dphi/dx)`` at a single point."""
    _check_finite(x, y, t)
    vx, vy = _gyre_vel(float(x), float(y), float(t), params.as_array())
    return np.array([vx, vy])


def max_speed(params=DoubleGyreParams()):
    """Nominal peak background speed, ``pi * A``."""
    return math.pi * params.A


# --------------------------------------------------------------------------
# oracle fields

@numba.njit(cache=True)
def _uniform_vel(x, y, t, p):
    return p[0], p[1]


@numba.njit(cache=True)
def _uniform_grad(x, y, t, p):
    return 0.0, 0.0, 0.0, 0.0


@numba.njit(cache=True)
def _saddle_vel(x, y, t, p):
    return p[0] * x, -p[0] * y


@numba.njit(cache=True)
def _saddle_grad(x, y, t, p):
    return p[0], 0.0, 0.0, -p[0]


class FlowField:
    """Abstract time-varying velocity field on the plane."""

    #: forcing period of a time-periodic field, ``None`` otherwise
    period = None

    def kernel(self):
        """Return ``(vel, grad, params)`` with numba-compiled point kernels."""
        raise NotImplementedError

    def velocity(self, x, y, t):
        _check_finite(x, y, t)
        vel, _, p = self.kernel()
        return np.array(vel(float(x), float(y), float(t), p))

    def velocity_gradient(self, x, y, t):
        _check_finite(x, y, t)
        _, grad, p = self.kernel()
        return np.array(grad(float(x), float(y), float(t), p)).reshape(2, 2)

    def reversed(self):
        """Field whose forward flow is this field's backward flow."""
        return TimeReversed(self)


class DoubleGyre(FlowField):
    def __init__(self, params=None, **kwargs):
        self.params = params if params is not None else DoubleGyreParams(**kwargs)
        self._p = self.params.as_array()
        self.period = self.params.period if self.params.epsilon > 0 else None

    def kernel(self):
        return _gyre_vel, _gyre_grad, self._p

    def stream_function(self, x, y, t):
        return stream_function(x, y, t, self.params)

    def max_speed(self):
        return max_speed(self.params)

    def __repr__(self):
        p = self.params
        return f"DoubleGyre(A={p.A!r}, epsilon={p.epsilon!r}, omega={p.omega!r})"


class Uniform(FlowField):
    """Constant velocity ``(vx, vy)``."""

    def __init__(self, vx=1.0, vy=0.0):
        self._p = np.array([vx, vy], dtype=np.float64)

    def kernel(self):
        return _uniform_vel, _uniform_grad, self._p

    def __repr__(self):
        return f"Uniform({self._p[0]!r}, {self._p[1]!r})"


class LinearSaddle(FlowField):
    """Hyperbolic saddle ``v = (rate * x, -rate * y)``; flow map is ``diag(e^{rate T}, e^{-rate T})``."""

    def __init__(self, rate=1.0):
        self.rate = rate
        self._p = np.array([rate], dtype=np.float64)

    def kernel(self):
        return _saddle_vel, _saddle_grad, self._p

    def __repr__(self):
        return f"LinearSaddle(rate={self.rate!r})"


@lru_cache(maxsize=None)
def _reversed_kernels(vel, grad):
    @numba.njit
    def rvel(x, y, t, p):
        vx, vy = vel(x, y, -t, p)
        return -vx, -vy

    @numba.njit
    def rgrad(x, y, t, p):
        a11, a12, a21, a22 = grad(x, y, -t, p)
        return -a11, -a12, -a21, -a22

    return rvel, rgrad


class TimeReversed(FlowField):
    """``w(x, t) = -v(x, -t)``: running it forward retraces ``v`` backward."""

    def __init__(self, base):
        self.base = base
        self.period = base.period

    def kernel(self):
        vel, grad, p = self.base.kernel()
        rvel, rgrad = _reversed_kernels(vel, grad)
        return rvel, rgrad, p

    def reversed(self):
        return self.base

    def __repr__(self):
        return f"TimeReversed({self.base!r})"
