"""Schrödinger evolution by Strang split-step and by exact eigenbasis phases."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .grid import Grid, WaveFunction, dump_wavefunction, l2_norm_sq


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    """Potential energy ``V(q)``.

    kind is one of ``free``, ``harmonic`` (``V = m omega^2 q^2 / 2``),
    ``quartic`` (``V = a q^2 + b q^4``) or ``tabulated`` (values on the grid).
    In 2D the analytic kinds act on every axis and are summed; pass a tuple of
    specs to :func:`tabulate` for different potentials per axis.
    """

    kind: str = "free"
    omega: float = 1.0
    a: float = 0.0
    b: float = 0.0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("free", "harmonic", "quartic", "tabulated"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "quartic" and self.b < 0:
            raise ValueError("quartic potential needs b >= 0 to be confining")
        if self.kind == "tabulated":
            if self.values is None:
                raise ValueError("tabulated potential needs values")
            v = np.array(self.values, dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError("tabulated potential values must be finite")
            v.flags.writeable = False
            object.__setattr__(self, "values", v)

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def harmonic(cls, omega=1.0):
        return cls("harmonic", omega=omega)

    @classmethod
    def quartic(cls, a, b):
        return cls("quartic", a=a, b=b)

    @classmethod
    def tabulated(cls, values):
        return cls("tabulated", values=values)

    @classmethod
    def from_csv(cls, path, grid: Grid):
        """Read ``q,value`` rows and resample periodically onto a 1D grid."""
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        q, v = table[:, 0], table[:, 1]
        order = np.argsort(q)
        return cls.tabulated(np.interp(grid.axis(0), q[order], v[order], period=grid.extent[0]))

    def on_axis(self, x: np.ndarray, mass: float) -> np.ndarray:
        if self.kind == "free":
            return np.zeros_like(x)
        if self.kind == "harmonic":
            return 0.5 * mass * self.omega**2 * x**2
        if self.kind == "quartic":
            return self.a * x**2 + self.b * x**4
        return np.asarray(self.values, dtype=float)

    def to_dict(self) -> dict:
        if self.kind == "harmonic":
            return {"kind": "harmonic", "omega": self.omega}
        if self.kind == "quartic":
            return {"kind": "quartic", "a": self.a, "b": self.b}
        if self.kind == "tabulated":
            return {"kind": "tabulated", "values": self.values.tolist()}
        return {"kind": "free"}


def tabulate(V, grid: Grid, mass=1.0) -> np.ndarray:
    """Potential values on the grid. ``V`` may be a spec or a per-axis tuple of specs."""
    masses = (mass,) * grid.dim if np.ndim(mass) == 0 else tuple(mass)
    if isinstance(V, PotentialSpec) and V.kind == "tabulated":
        vals = np.asarray(V.values, dtype=float)
        if vals.size == int(np.prod(grid.shape)):
            return vals.reshape(grid.shape)
        if grid.dim == 2 and vals.size == grid.points[0]:
            V = (V, V)
        else:
            raise ValueError("tabulated potential does not match the grid")
    specs = (V,) * grid.dim if isinstance(V, PotentialSpec) else tuple(V)
    if len(specs) != grid.dim:
        raise ValueError("need one potential spec per axis")
    out = np.zeros(grid.shape)
    for k, spec in enumerate(specs):
        shape = [1] * grid.dim
        shape[k] = grid.points[k]
        out = out + spec.on_axis(grid.axis(k), masses[k]).reshape(shape)
    return out


# ---------------------------------------------------------------------------
# Hamiltonian


class Hamiltonian:
    """Discrete ``H = -sum hbar^2/(2 m_k) d_k^2 + V`` on a periodic grid.

    ``laplacian="spectral"`` uses the Fourier second derivative, consistent
    with the split-step kinetic factor and the spectral velocity field.
    ``laplacian="fd2"`` uses the periodic three-point stencil.
    Both are real symmetric.
    """

    def __init__(self, V, grid: Grid, hbar=1.0, mass=1.0, laplacian="spectral"):
        if laplacian not in ("spectral", "fd2"):
            raise ValueError(f"unknown laplacian {laplacian!r}")
        self.grid = grid
        self.hbar = float(hbar)
        self.mass = (float(mass),) * grid.dim if np.ndim(mass) == 0 else tuple(map(float, mass))
        self.laplacian = laplacian
        self.potential = V
        self.V = tabulate(V, grid, self.mass)
        self._symbols = []
        for k in range(grid.dim):
            h = grid.spacing[k]
            kk = grid.wavenumbers(k)
            if laplacian == "spectral":
                sym = -(kk**2)
            else:
                sym = -(4.0 / h**2) * np.sin(kk * h / 2) ** 2
            self._symbols.append(-(self.hbar**2) / (2 * self.mass[k]) * sym)

    @property
    def size(self) -> int:
        return int(np.prod(self.grid.shape))

    def kinetic_symbol(self, k: int) -> np.ndarray:
        """Fourier multiplier of the kinetic term along axis ``k``."""
        return self._symbols[k]

    def apply(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a).reshape(self.grid.shape)
        out = self.V * a
        for k in range(self.grid.dim):
            shape = [1] * self.grid.dim
            shape[k] = self.grid.points[k]
            spec = np.fft.fft(a, axis=k) * self._symbols[k].reshape(shape)
            t = np.fft.ifft(spec, axis=k)
            out = out + (t.real if np.isrealobj(a) else t)
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v).ravel()

    def to_dense(self) -> np.ndarray:
        if self.grid.dim != 1:
            raise ValueError("dense form is only built for 1D grids")
        n = self.grid.points[0]
        col = np.real(np.fft.ifft(self._symbols[0]))
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        T = col[idx]
        H = 0.5 * (T + T.T)
        H[np.diag_indices(n)] += self.V
        return H

    def as_linear_operator(self):
        n = self.size
        return scipy.sparse.linalg.LinearOperator((n, n), matvec=self.matvec, dtype=float)

    def expectation(self, psi: WaveFunction) -> float:
        h = psi.grid.cell_volume
        a = psi.amplitudes
        return float(np.real(np.vdot(a, self.apply(a))) * h / l2_norm_sq(psi))


def build_hamiltonian(V, grid: Grid, hbar=1.0, mass=1.0, laplacian="spectral") -> Hamiltonian:
    return Hamiltonian(V, grid, hbar, mass, laplacian)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Lowest eigenpairs; eigenvectors have unit norm under the grid Riemann sum."""

    grid: Grid
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # shape (k, *grid.shape)
    hbar: float = 1.0
    mass: tuple[float, ...] | float = 1.0

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def mode(self, j: int) -> WaveFunction:
        return WaveFunction(self.grid, self.eigenvectors[j], self.mass, self.hbar)

    def to_csv(self, path) -> None:
        table = np.column_stack((np.arange(self.count), self.eigenvalues))
        np.savetxt(path, table, delimiter=",", header="index,eigenvalue", comments="", fmt=["%d", "%.17g"])

    def dump(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "eigenvalues.csv"]
        self.to_csv(written[0])
        for j in range(self.count):
            path = directory / f"eigenvector_{j:03d}.bin"
            dump_wavefunction(self.mode(j), path)
            written.append(path)
        return written


def _fix_sign(vec: np.ndarray, h: float) -> np.ndarray:
    # positive mean; odd states have zero mean, so fall back to the first significant lobe
    s = vec.sum() * h
    if abs(s) > 1e-8:
        return vec if s > 0 else -vec
    flat = vec.ravel()
    first = flat[np.argmax(np.abs(flat) > 1e-3 * np.abs(flat).max())]
    return vec if first > 0 else -vec


def solve_eigenbasis(H: Hamiltonian, k: int, tol: float = 1e-6) -> EigenSystem:
    grid = H.grid
    if not 1 <= k <= min(grid.points) // 4:
        raise ValueError(f"k must be in [1, n/4], got {k}")
    h = grid.cell_volume
    if grid.dim == 1:
        w, v = scipy.linalg.eigh(H.to_dense(), subset_by_index=[0, k - 1])
    else:
        try:
            w, v = scipy.sparse.linalg.eigsh(H.as_linear_operator(), k=k, which="SA", tol=1e-12)
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise EigenSolverError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(w)
        w, v = w[order], v[:, order]
    vecs = []
    for j in range(k):
        vec = v[:, j].reshape(grid.shape) / np.sqrt(h)
        vecs.append(_fix_sign(vec, h))
    vecs = np.array(vecs)
    residuals = np.array(
        [np.sqrt(np.sum((H.apply(vecs[j]) - w[j] * vecs[j]) ** 2) * h) for j in range(k)]
    )
    flat = vecs.reshape(k, -1)
    gram = flat @ flat.T * h
    if residuals.max() > tol or np.abs(gram - np.eye(k)).max() > 1e-8:
        raise EigenSolverError(
            f"eigenpairs failed verification: max residual {residuals.max():.3e}, "
            f"orthonormality error {np.abs(gram - np.eye(k)).max():.3e}"
        )
    vecs.flags.writeable = False
    return EigenSystem(grid, np.asarray(w), vecs, H.hbar, H.mass)


@dataclass(frozen=True, eq=False)
class SuperpositionState:
    """``sum_j c_j exp(i theta_j) phi_j`` over selected eigenstates."""

    eigensystem: EigenSystem
    indices: tuple[int, ...]
    moduli: tuple[float, ...]
    phases: tuple[float, ...] | None = None

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        mod = tuple(float(c) for c in self.moduli)
        ph = tuple(0.0 for _ in idx) if self.phases is None else tuple(float(p) for p in self.phases)
        if not (len(idx) == len(mod) == len(ph)) or not idx:
            raise ValueError("indices, moduli and phases must have equal nonzero length")
        if any(c <= 0 for c in mod):
            raise ValueError("moduli must be positive")
        if abs(sum(c * c for c in mod) - 1.0) > 1e-12:
            raise ValueError("moduli must satisfy sum c_j^2 = 1")
        if any(i >= self.eigensystem.count or i < 0 for i in idx):
            raise ValueError("superposition index outside the eigensystem")
        ph = tuple(p % (2 * np.pi) for p in ph)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "moduli", mod)
        object.__setattr__(self, "phases", ph)

    @property
    def energies(self) -> np.ndarray:
        return self.eigensystem.eigenvalues[list(self.indices)]

    def amplitudes_at(self, t: float) -> np.ndarray:
        es = self.eigensystem
        out = np.zeros(es.grid.shape, dtype=np.complex128)
        for j, c, th in zip(self.indices, self.moduli, self.phases):
            out += (c * np.exp(1j * th - 1j * es.eigenvalues[j] * t / es.hbar)) * es.eigenvectors[j]
        return out

    def phase_average_density(self) -> np.ndarray:
        es = self.eigensystem
        return sum(c * c * es.eigenvectors[j] ** 2 for j, c in zip(self.indices, self.moduli))


def propagate_eigenbasis(state: SuperpositionState, t: float) -> WaveFunction:
    es = state.eigensystem
    return WaveFunction(es.grid, state.amplitudes_at(t), es.mass, es.hbar)


# ---------------------------------------------------------------------------
# Split-step


def _kinetic_phase(grid: Grid, hbar, mass, dt) -> list[np.ndarray]:
    return [np.exp(-1j * hbar * grid.wavenumbers(k) ** 2 * dt / (2 * mass[k])) for k in range(grid.dim)]


def _apply_kinetic(a: np.ndarray, phases) -> np.ndarray:
    dim = a.ndim
    spec = np.fft.fftn(a)
    for k, ph in enumerate(phases):
        shape = [1] * dim
        shape[k] = ph.size
        spec *= ph.reshape(shape)
    return np.fft.ifftn(spec)


def propagate_split_step(psi: WaveFunction, V, dt: float, steps: int) -> WaveFunction:
    """Strang splitting: half kick, free drift in Fourier space, half kick.

    Every step applies both half kicks, so splitting a run into pieces
    reproduces the uninterrupted run exactly.
    """
    if steps < 0 or not dt > 0:
        raise ValueError("need dt > 0 and steps >= 0")
    if steps == 0:
        return psi
    grid = psi.grid
    half_kick = np.exp(-0.5j * tabulate(V, grid, psi.mass) * dt / psi.hbar)
    drift = _kinetic_phase(grid, psi.hbar, psi.mass, dt)
    a = np.array(psi.amplitudes)
    for _ in range(steps):
        a = half_kick * a
        a = _apply_kinetic(a, drift)
        a = half_kick * a
    return psi.with_amplitudes(a)


def propagate_free(psi: WaveFunction, t: float) -> WaveFunction:
    """Exact free evolution of the periodic band-limited state (one Fourier phase)."""
    if t == 0:
        return psi
    return psi.with_amplitudes(_apply_kinetic(psi.amplitudes, _kinetic_phase(psi.grid, psi.hbar, psi.mass, t)))
