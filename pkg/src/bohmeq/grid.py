"""Uniform periodic grids, wavefunctions on them, and density sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import Ensemble


class TrivialWaveFunctionError(ValueError):
    """Raised when an operation needs a wavefunction that is not identically zero."""


def _as_tuple(value, dim, cast):
    if np.ndim(value) == 0:
        return tuple(cast(value) for _ in range(dim))
    out = tuple(cast(v) for v in value)
    if len(out) != dim:
        raise ValueError(f"expected {dim} per-axis values, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Periodic box ``[-L/2, L/2)`` per axis sampled at ``n`` points.

    ``extent`` and ``points`` accept a scalar (same for every axis) or one
    value per axis.
    """

    dim: int
    extent: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        extent = _as_tuple(self.extent, self.dim, float)
        points = _as_tuple(self.points, self.dim, int)
        for L, n in zip(extent, points):
            if not L > 0:
                raise ValueError(f"extent must be positive, got {L}")
            if n < 64 or n & (n - 1):
                raise ValueError(f"points per axis must be a power of two >= 64, got {n}")
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "points", points)

    @classmethod
    def uniform(cls, extent: float, points: int, dim: int = 1) -> "Grid":
        return cls(dim, extent, points)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.extent, self.points))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def lower(self) -> tuple[float, ...]:
        return tuple(-L / 2 for L in self.extent)

    def axis(self, k: int) -> np.ndarray:
        L, n = self.extent[k], self.points[k]
        return -L / 2 + (L / n) * np.arange(n)

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*(self.axis(k) for k in range(self.dim)), indexing="ij")

    def wavenumbers(self, k: int) -> np.ndarray:
        """Angular wavenumbers in FFT order for axis ``k``."""
        return 2 * np.pi * np.fft.fftfreq(self.points[k], d=self.spacing[k])

    def wrap(self, q: np.ndarray) -> np.ndarray:
        """Map configurations into the fundamental domain."""
        q = np.asarray(q, dtype=float)
        lo = np.asarray(self.lower)
        L = np.asarray(self.extent)
        return lo + np.mod(q - lo, L)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Complex amplitudes on a :class:`Grid`; immutable after construction."""

    grid: Grid
    amplitudes: np.ndarray
    mass: tuple[float, ...] | float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=np.complex128)
        if a.size != int(np.prod(self.grid.shape)):
            raise ValueError(
                f"amplitudes have {a.size} entries, grid needs {int(np.prod(self.grid.shape))}"
            )
        a = a.reshape(self.grid.shape)
        if not np.all(np.isfinite(a)):
            raise ValueError("wavefunction amplitudes must be finite")
        a.flags.writeable = False
        mass = _as_tuple(self.mass, self.grid.dim, float)
        if any(m <= 0 for m in mass) or not self.hbar > 0:
            raise ValueError("mass and hbar must be positive")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "hbar", float(self.hbar))

    def with_amplitudes(self, amplitudes) -> "WaveFunction":
        return WaveFunction(self.grid, amplitudes, self.mass, self.hbar)

    def conj(self) -> "WaveFunction":
        return self.with_amplitudes(np.conj(self.amplitudes))

    def __mul__(self, c) -> "WaveFunction":
        return self.with_amplitudes(c * self.amplitudes)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class DensityGrid:
    grid: Grid
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("density values must be finite and nonnegative")
        if self.normalized:
            total = v.sum() * self.grid.cell_volume
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"density flagged normalized but integrates to {total!r}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def normalize(self) -> "DensityGrid":
        total = self.total()
        if not total > 1e-300:
            raise ValueError("cannot normalize an (almost) vanishing density")
        return DensityGrid(self.grid, self.values / total, normalized=True)


# ---------------------------------------------------------------------------
# Norms and derivatives


def _abs2(a: np.ndarray) -> np.ndarray:
    return a.real * a.real + a.imag * a.imag


def l2_norm_sq(psi: WaveFunction) -> float:
    """Riemann sum of ``|psi|^2`` over the grid."""
    total = float(_abs2(psi.amplitudes).sum() * psi.grid.cell_volume)
    if not total > 0:
        raise TrivialWaveFunctionError("trivial wave function")
    return total


def normalize(psi: WaveFunction) -> WaveFunction:
    norm = np.sqrt(l2_norm_sq(psi))
    return psi.with_amplitudes(psi.amplitudes / norm)


def _real_derivative(a: np.ndarray, grid: Grid, axis: int, order: int) -> np.ndarray:
    n = grid.points[axis]
    k = 2 * np.pi * np.fft.rfftfreq(n, d=grid.spacing[axis])
    mult = (1j * k) ** order
    if order % 2:
        # the Nyquist mode has no real odd derivative
        mult[-1] = 0.0
    shape = [1] * a.ndim
    shape[axis] = mult.size
    spec = np.fft.rfft(a, axis=axis) * mult.reshape(shape)
    return np.fft.irfft(spec, n=n, axis=axis)


def derivative_array(a: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Spectral derivative of a complex array, differentiating real and imaginary parts separately.

    Working on the parts keeps real inputs exactly real and makes
    ``D(conj(a)) == conj(D(a))`` hold bit for bit.
    """
    return _real_derivative(a.real, grid, axis, order) + 1j * _real_derivative(
        a.imag, grid, axis, order
    )


def spectral_derivative(psi: WaveFunction, axis: int = 0, order: int = 1) -> WaveFunction:
    """``order``-th partial derivative along ``axis`` (0-based) by FFT."""
    if not 0 <= axis < psi.grid.dim:
        raise ValueError(f"axis must be in [0, {psi.grid.dim}), got {axis}")
    if not 1 <= order <= 4:
        raise ValueError(f"order must be in [1, 4], got {order}")
    return psi.with_amplitudes(derivative_array(psi.amplitudes, psi.grid, axis, order))


def density_of(psi: WaveFunction) -> DensityGrid:
    return DensityGrid(psi.grid, _abs2(psi.amplitudes), normalized=False)


# ---------------------------------------------------------------------------
# Piecewise-constant cell model and sampling
#
# Cell i is centred on node x_i with width h.  Cell 0 straddles the seam, so
# along one axis the domain [-L/2, L/2) is cut into a half cell, n-1 full
# cells and a closing half cell, both halves carrying the value at node 0.


def cell_edges(grid: Grid, axis: int = 0) -> np.ndarray:
    L, n = grid.extent[axis], grid.points[axis]
    h = L / n
    inner = -L / 2 + h / 2 + h * np.arange(n)
    return np.concatenate(([-L / 2], inner[:-1], [inner[-1]], [L / 2]))


def _segment_values(values_1d: np.ndarray) -> np.ndarray:
    return np.concatenate((values_1d, values_1d[:1]))


def cumulative_at_edges(values_1d: np.ndarray, edges: np.ndarray) -> np.ndarray:
    seg = _segment_values(values_1d) * np.diff(edges)
    return np.concatenate(([0.0], np.cumsum(seg)))


def cdf_function(p: DensityGrid, axis: int = 0):
    """Continuous CDF of a 1D density under the cell model, linear within cells."""
    if p.grid.dim != 1:
        raise ValueError("CDF is defined for 1D densities only")
    edges = cell_edges(p.grid, axis)
    cum = cumulative_at_edges(p.values, edges)
    cum = cum / cum[-1]

    def cdf(q):
        return np.interp(q, edges, cum)

    return cdf


def _inverse_cell_cdf(values_1d, edges, u):
    seg = _segment_values(values_1d)
    cum = cumulative_at_edges(values_1d, edges)
    u = u * cum[-1]
    j = np.searchsorted(cum, u, side="right") - 1
    j = np.clip(j, 0, seg.size - 1)
    # zero-mass segments never get selected by side="right" except at u == total
    while True:
        empty = seg[j] <= 0
        if not empty.any():
            break
        j[empty] -= 1
    return edges[j] + (u - cum[j]) / seg[j], j


def sample_from_density(p: DensityGrid, count: int, seed: int) -> Ensemble:
    """Draw ``count`` configurations from ``p`` by inverse-CDF sampling.

    2D densities are sampled through the marginal of the first axis and the
    conditional row of the second.
    """
    if not p.normalized:
        raise ValueError("sample_from_density needs a normalized density")
    if count < 1:
        raise ValueError("count must be >= 1")
    grid = p.grid
    rng = np.random.default_rng(seed)
    if grid.dim == 1:
        q, _ = _inverse_cell_cdf(p.values, cell_edges(grid, 0), rng.random(count))
        positions = q[:, None]
    else:
        h2 = grid.spacing[1]
        marginal = p.values.sum(axis=1) * h2
        u1 = rng.random(count)
        u2 = rng.random(count)
        q1, seg = _inverse_cell_cdf(marginal, cell_edges(grid, 0), u1)
        rows = np.where(seg == grid.points[0], 0, seg)
        q2 = np.empty(count)
        edges2 = cell_edges(grid, 1)
        for r in np.unique(rows):
            sel = rows == r
            q2[sel], _ = _inverse_cell_cdf(p.values[r], edges2, u2[sel])
        positions = np.column_stack((q1, q2))
    return Ensemble(grid.wrap(positions), seed=seed)


# ---------------------------------------------------------------------------
# File formats


def dump_wavefunction(psi: WaveFunction, path) -> None:
    """Little-endian binary: dim, n per axis, L per axis, hbar, mass per axis, then re/im pairs."""
    g = psi.grid
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", g.dim))
        fh.write(struct.pack(f"<{g.dim}q", *g.points))
        fh.write(struct.pack(f"<{g.dim}d", *g.extent))
        fh.write(struct.pack("<d", psi.hbar))
        fh.write(struct.pack(f"<{g.dim}d", *psi.mass))
        data = np.empty(psi.amplitudes.size * 2, dtype="<f8")
        flat = psi.amplitudes.ravel(order="C")
        data[0::2] = flat.real
        data[1::2] = flat.imag
        fh.write(data.tobytes())


def load_wavefunction(path) -> WaveFunction:
    raw = Path(path).read_bytes()
    (dim,) = struct.unpack_from("<q", raw, 0)
    off = 8
    points = struct.unpack_from(f"<{dim}q", raw, off)
    off += 8 * dim
    extent = struct.unpack_from(f"<{dim}d", raw, off)
    off += 8 * dim
    (hbar,) = struct.unpack_from("<d", raw, off)
    off += 8
    mass = struct.unpack_from(f"<{dim}d", raw, off)
    off += 8 * dim
    data = np.frombuffer(raw, dtype="<f8", offset=off)
    grid = Grid(dim, extent, points)
    return WaveFunction(grid, data[0::2] + 1j * data[1::2], mass, hbar)


def write_density_csv(p: DensityGrid, path) -> None:
    g = p.grid
    coords = [c.ravel() for c in g.mesh()]
    header = ",".join([f"q_{k + 1}" for k in range(g.dim)] + ["value"])
    table = np.column_stack(coords + [p.values.ravel()])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def read_density_csv(path, grid: Grid, normalized: bool = False) -> DensityGrid:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DensityGrid(grid, table[:, -1], normalized=normalized)
