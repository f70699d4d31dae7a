"""Finite-time Lyapunov exponent fields and their ridges."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._csv import SchemaError, read_rows, write_rows
from .advect import FlowMapGrid, GridSpec, IntegratorConfig, flow_map

__all__ = [
    "FtleError",
    "FtleField",
    "RidgeSet",
    "jacobian",
    "flow_map_jacobians",
    "ftle_field",
    "ftle_from_flow_map",
    "extract_ridges",
    "ftle_at",
    "ftle_at_many",
    "write_csv",
    "read_csv",
]

FTLE_COLUMNS = ("x", "y", "sigma", "direction", "t0", "T")


class FtleError(ArithmeticError):
    """Degenerate Cauchy-Green tensor."""


@dataclass(frozen=True)
class FtleField:
    """FTLE values on a grid; ``sigma`` is ``(ny, nx)`` and NaN on boundary nodes."""

    spec: GridSpec
    t0: float
    T: float
    sigma: np.ndarray

    @property
    def direction(self):
        return "forward" if self.T > 0 else "backward"

    @property
    def defined(self):
        return self.sigma[1:-1, 1:-1]


@dataclass(frozen=True)
class RidgeSet:
    points: np.ndarray  # (n, 3) rows of x, y, sigma
    threshold: float
    direction: str

    def __len__(self):
        return len(self.points)


def _check_interior(spec, i, j):
    if not (1 <= i <= spec.nx - 2 and 1 <= j <= spec.ny - 2):
        raise IndexError(f"node ({i}, {j}) is not interior to a {spec.nx}x{spec.ny} grid")


def jacobian(fmap: FlowMapGrid, node):
    """Central-difference flow-map Jacobian at interior node ``(i, j)``."""
    i, j = node
    _check_interior(fmap.spec, i, j)
    P = fmap.positions
    X0 = fmap.initial
    ddx = X0[j, i + 1, 0] - X0[j, i - 1, 0]
    ddy = X0[j + 1, i, 1] - X0[j - 1, i, 1]
    return np.array([
        [(P[j, i + 1, 0] - P[j, i - 1, 0]) / ddx, (P[j + 1, i, 0] - P[j - 1, i, 0]) / ddy],
        [(P[j, i + 1, 1] - P[j, i - 1, 1]) / ddx, (P[j + 1, i, 1] - P[j - 1, i, 1]) / ddy],
    ])


def flow_map_jacobians(fmap: FlowMapGrid):
    """Jacobians at every interior node, shape ``(ny-2, nx-2, 2, 2)``."""
    P = fmap.positions
    X0 = fmap.initial
    ddx = (X0[1:-1, 2:, 0] - X0[1:-1, :-2, 0])[..., None]
    ddy = (X0[2:, 1:-1, 1] - X0[:-2, 1:-1, 1])[..., None]
    J = np.empty(P[1:-1, 1:-1].shape + (2,))
    J[..., :, 0] = (P[1:-1, 2:] - P[1:-1, :-2]) / ddx
    J[..., :, 1] = (P[2:, 1:-1] - P[:-2, 1:-1]) / ddy
    return J


def ftle_from_flow_map(fmap: FlowMapGrid, method="eig"):
    """``sigma = ln sqrt(lambda_max(J^T J)) / |T|``; ``method="svd"`` uses the top singular value."""
    J = flow_map_jacobians(fmap)
    T = abs(fmap.T)
    if method == "eig":
        C = np.swapaxes(J, -1, -2) @ J
        lam = np.linalg.eigvalsh(C)[..., -1]
        if np.any(~(lam > 0)):
            raise FtleError("Cauchy-Green tensor has non-positive largest eigenvalue")
        inner = 0.5 * np.log(lam) / T
    elif method == "svd":
        s = np.linalg.svd(J, compute_uv=False)[..., 0]
        if np.any(~(s > 0)):
            raise FtleError("flow-map Jacobian has zero largest singular value")
        inner = np.log(s) / T
    else:
        raise ValueError(f"unknown FTLE method {method!r}")
    spec = fmap.spec
    sigma = np.full((spec.ny, spec.nx), np.nan)
    sigma[1:-1, 1:-1] = inner
    return FtleField(spec=spec, t0=fmap.t0, T=fmap.T, sigma=sigma)


def ftle_field(field, spec, t0, T, cfg=IntegratorConfig(), method="eig"):
    """FTLE of ``field`` over ``[t0, t0 + T]`` on the nodes of ``spec``."""
    if T == 0:
        raise ValueError("FTLE horizon must be non-zero")
    return ftle_from_flow_map(flow_map(field, spec, t0, T, cfg), method=method)


def extract_ridges(f: FtleField, quantile=0.9, band=0.5):
    """Height ridges of ``sigma`` as a point set.

    A node qualifies when its value is at or above the ``quantile`` of all
    defined values, the Hessian's smaller eigenvalue ``lam`` is negative, and
    the slope along that eigenvector ``n`` is small enough that the 1-D maximum
    along ``n`` falls within ``band`` grid cells of the node: ``|grad.n| <= band * h_n * |lam|``.
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    spec = f.spec
    if spec.nx < 5 or spec.ny < 5:
        raise ValueError("ridge extraction needs at least 3x3 defined nodes")
    s = f.sigma
    vals = f.defined
    empty = RidgeSet(points=np.empty((0, 3)), threshold=float("nan"), direction=f.direction)
    span = float(np.max(vals) - np.min(vals))
    if span <= 1e-12 * max(1.0, float(np.max(np.abs(vals)))):
        return empty
    threshold = float(np.quantile(vals, quantile))

    # second-difference stencils need sigma on both neighbours: nodes 2..n-3
    dx, dy = spec.dx, spec.dy
    c = s[2:-2, 2:-2]
    gx = (s[2:-2, 3:-1] - s[2:-2, 1:-3]) / (2 * dx)
    gy = (s[3:-1, 2:-2] - s[1:-3, 2:-2]) / (2 * dy)
    hxx = (s[2:-2, 3:-1] - 2 * c + s[2:-2, 1:-3]) / dx**2
    hyy = (s[3:-1, 2:-2] - 2 * c + s[1:-3, 2:-2]) / dy**2
    hxy = (s[3:-1, 3:-1] - s[3:-1, 1:-3] - s[1:-3, 3:-1] + s[1:-3, 1:-3]) / (4 * dx * dy)

    H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
    w, V = np.linalg.eigh(H)
    lam = w[..., 0]
    n = V[..., :, 0]
    slope = np.abs(gx * n[..., 0] + gy * n[..., 1])
    h_n = np.abs(n[..., 0]) * dx + np.abs(n[..., 1]) * dy
    mask = (c >= threshold) & (lam < 0) & (slope <= band * h_n * np.abs(lam))

    jj, ii = np.nonzero(mask)
    xs = spec.xs[ii + 2]
    ys = spec.ys[jj + 2]
    pts = np.column_stack([xs, ys, c[jj, ii]]) if len(ii) else np.empty((0, 3))
    return RidgeSet(points=pts, threshold=threshold, direction=f.direction)


def ftle_at_many(f: FtleField, xs, ys):
    """Bilinear interpolation of ``sigma``; NaN where the query leaves the defined interior."""
    spec = f.spec
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    gx = (xs - spec.x_min) / spec.dx
    gy = (ys - spec.y_min) / spec.dy
    inside = (gx >= 1) & (gx <= spec.nx - 2) & (gy >= 1) & (gy <= spec.ny - 2)
    gx = np.where(inside, gx, 1.0)
    gy = np.where(inside, gy, 1.0)
    i0 = np.minimum(np.floor(gx).astype(int), spec.nx - 3)
    j0 = np.minimum(np.floor(gy).astype(int), spec.ny - 3)
    fx = gx - i0
    fy = gy - j0
    s = f.sigma
    val = ((1 - fx) * (1 - fy) * s[j0, i0] + fx * (1 - fy) * s[j0, i0 + 1]
           + (1 - fx) * fy * s[j0 + 1, i0] + fx * fy * s[j0 + 1, i0 + 1])
    return np.where(inside, val, np.nan)


def ftle_at(f: FtleField, x):
    """Bilinear ``sigma`` at point ``x``; raises ``ValueError`` outside the defined interior."""
    val = float(ftle_at_many(f, [x[0]], [x[1]])[0])
    if math.isnan(val):
        raise ValueError(f"point {tuple(x)} lies outside the FTLE-defined region")
    return val


def write_csv(f: FtleField, path):
    """One row per defined node, row-major in j then i."""
    xs, ys = f.spec.xs, f.spec.ys
    rows = ((xs[i], ys[j], f.sigma[j, i], f.direction, f.t0, f.T)
            for j in range(1, f.spec.ny - 1) for i in range(1, f.spec.nx - 1))
    write_rows(path, FTLE_COLUMNS, rows)


def read_csv(path):
    """Rebuild an :class:`FtleField` from :func:`write_csv` output."""
    rows = read_rows(path, FTLE_COLUMNS)
    if not rows:
        raise SchemaError(f"{path}: no FTLE rows")
    x = np.array([float(r[0]) for r in rows])
    y = np.array([float(r[1]) for r in rows])
    ux, uy = np.unique(x), np.unique(y)
    nx, ny = len(ux) + 2, len(uy) + 2
    dx, dy = ux[1] - ux[0], uy[1] - uy[0]
    spec = GridSpec(ux[0] - dx, ux[-1] + dx, uy[0] - dy, uy[-1] + dy, nx, ny)
    sigma = np.full((ny, nx), np.nan)
    sigma[1:-1, 1:-1] = np.array([float(r[2]) for r in rows]).reshape(ny - 2, nx - 2)
    return FtleField(spec=spec, t0=float(rows[0][4]), T=float(rows[0][5]), sigma=sigma)
