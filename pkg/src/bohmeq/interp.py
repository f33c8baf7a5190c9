"""Periodic cubic B-spline interpolation of grid fields at scattered points."""

from __future__ import annotations

import numpy as np
from numba import njit

from .grid import Grid


def _prefilter_symbol(n: int, half: bool) -> np.ndarray:
    j = np.arange(n // 2 + 1 if half else n)
    return (4.0 + 2.0 * np.cos(2 * np.pi * j / n)) / 6.0


def bspline_coefficients(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Coefficients whose cubic B-spline interpolates ``values`` at the nodes.

    ``values`` has shape ``(c, *grid.shape)`` for ``c`` stacked components.
    """
    v = np.asarray(values, dtype=float)
    spec = np.fft.rfftn(v, axes=tuple(range(1, grid.dim + 1)))
    for k in range(grid.dim):
        sym = _prefilter_symbol(grid.points[k], half=(k == grid.dim - 1))
        shape = [1] * (grid.dim + 1)
        shape[k + 1] = sym.size
        spec /= sym.reshape(shape)
    return np.fft.irfftn(spec, s=grid.shape, axes=tuple(range(1, grid.dim + 1)))


@njit(cache=True, inline="always")
def _weights(s):
    s2 = s * s
    s3 = s2 * s
    w0 = (1.0 - s) ** 3 / 6.0
    w1 = (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0
    w2 = (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0
    w3 = s3 / 6.0
    return w0, w1, w2, w3


@njit(cache=True, inline="always")
def _locate(q, x0, h, n):
    u = (q - x0) / h
    fl = np.floor(u)
    i = int(fl) % n
    if i < 0:
        i += n
    return i, u - fl


@njit(cache=True)
def eval_1d(coef, x0, h, q, out):
    """``coef`` (c, n), ``q`` (N,), writes ``out`` (N, c)."""
    nc, n = coef.shape
    for m in range(q.shape[0]):
        i, s = _locate(q[m], x0, h, n)
        w0, w1, w2, w3 = _weights(s)
        im = (i - 1) % n
        ip = (i + 1) % n
        ipp = (i + 2) % n
        for c in range(nc):
            out[m, c] = w0 * coef[c, im] + w1 * coef[c, i] + w2 * coef[c, ip] + w3 * coef[c, ipp]


@njit(cache=True)
def eval_2d(coef, x0, y0, hx, hy, q, out):
    """``coef`` (c, n1, n2), ``q`` (N, 2), writes ``out`` (N, c)."""
    nc, n1, n2 = coef.shape
    ix = np.empty(4, dtype=np.int64)
    iy = np.empty(4, dtype=np.int64)
    wx = np.empty(4)
    wy = np.empty(4)
    for m in range(q.shape[0]):
        i, s = _locate(q[m, 0], x0, hx, n1)
        j, r = _locate(q[m, 1], y0, hy, n2)
        wx[0], wx[1], wx[2], wx[3] = _weights(s)
        wy[0], wy[1], wy[2], wy[3] = _weights(r)
        for a in range(4):
            ix[a] = (i - 1 + a) % n1
            iy[a] = (j - 1 + a) % n2
        for c in range(nc):
            acc = 0.0
            for a in range(4):
                row = 0.0
                for b in range(4):
                    row += wy[b] * coef[c, ix[a], iy[b]]
                acc += wx[a] * row
            out[m, c] = acc


def evaluate(coef: np.ndarray, grid: Grid, q: np.ndarray) -> np.ndarray:
    """Interpolated values at points ``q`` (N, dim); returns (N, c)."""
    q = np.ascontiguousarray(q, dtype=float).reshape(-1, grid.dim)
    coef = np.ascontiguousarray(coef, dtype=float)
    out = np.empty((q.shape[0], coef.shape[0]))
    if grid.dim == 1:
        eval_1d(coef, grid.lower[0], grid.spacing[0], q[:, 0].copy(), out)
    else:
        eval_2d(coef, grid.lower[0], grid.lower[1], grid.spacing[0], grid.spacing[1], q, out)
    return out


def interpolate(values: np.ndarray, grid: Grid, q: np.ndarray) -> np.ndarray:
    """Cubic B-spline interpolation of one scalar grid field at points ``q``."""
    coef = bspline_coefficients(np.asarray(values)[None], grid)
    return evaluate(coef, grid, q)[:, 0]
