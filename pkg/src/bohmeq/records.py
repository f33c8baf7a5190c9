"""Stored Schrödinger evolutions and the standard experiment suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Grid, WaveFunction, normalize
from .propagator import (
    PotentialSpec,
    SuperpositionState,
    build_hamiltonian,
    propagate_free,
    propagate_split_step,
    solve_eigenbasis,
)


@dataclass(frozen=True, eq=False)
class EvolutionRecord:
    """Frames ``psi_t`` at ``times``; ``exact`` evaluates ``psi_t`` at any ``t`` when available."""

    grid: Grid
    times: np.ndarray
    frames: np.ndarray
    hbar: float = 1.0
    mass: tuple[float, ...] = (1.0,)
    potential: object = None
    provenance: str = "unknown"
    record_id: str = "record"
    exact: Callable[[float], np.ndarray] | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.shape != (times.size,) + tuple(self.grid.shape):
            raise ValueError("frames must have shape (n_times, *grid.shape)")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("frame times must increase")
        norms = np.sum(frames.real**2 + frames.imag**2, axis=tuple(range(1, frames.ndim)))
        norms = norms * self.grid.cell_volume
        if np.abs(norms - norms[0]).max() > 1e-9 * norms[0]:
            raise ValueError("frame norms drift: evolution is not unitary")
        times.flags.writeable = False
        frames.flags.writeable = False
        mass = (float(self.mass),) * self.grid.dim if np.ndim(self.mass) == 0 else tuple(self.mass)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "mass", mass)

    @property
    def n_frames(self) -> int:
        return self.times.size

    @property
    def dt_frame(self) -> float:
        return float(self.times[1] - self.times[0]) if self.n_frames > 1 else 0.0

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def frame(self, j: int) -> WaveFunction:
        return WaveFunction(self.grid, self.frames[j], self.mass, self.hbar)

    def frame_index(self, t: float) -> int | None:
        j = int(np.argmin(np.abs(self.times - t)))
        scale = max(1.0, abs(t))
        return j if abs(self.times[j] - t) <= 1e-12 * scale else None

    def state_at(self, t: float) -> WaveFunction:
        if self.exact is not None:
            return WaveFunction(self.grid, self.exact(t), self.mass, self.hbar)
        j = self.frame_index(t)
        if j is None:
            raise ValueError(f"record {self.record_id!r} has no frame at t={t}")
        return self.frame(j)

    @classmethod
    def from_frames(cls, frames, times, **kwargs) -> "EvolutionRecord":
        frames = list(frames)
        psi0 = frames[0]
        return cls(
            psi0.grid,
            np.asarray(times, dtype=float),
            np.array([f.amplitudes for f in frames]),
            psi0.hbar,
            psi0.mass,
            **kwargs,
        )


def _frame_times(T: float, dt_frame: float) -> np.ndarray:
    count = int(round(T / dt_frame))
    if abs(count * dt_frame - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a whole number of frame intervals")
    return dt_frame * np.arange(count + 1)


def record_from_callable(evaluate, psi0: WaveFunction, T, dt_frame, **kwargs) -> EvolutionRecord:
    times = _frame_times(T, dt_frame)
    frames = np.array([evaluate(t) for t in times])
    return EvolutionRecord(psi0.grid, times, frames, psi0.hbar, psi0.mass, exact=evaluate, **kwargs)


def record_from_superposition(state: SuperpositionState, T, dt_frame, potential=None, record_id="superposition"):
    es = state.eigensystem
    psi0 = WaveFunction(es.grid, state.amplitudes_at(0.0), es.mass, es.hbar)
    return record_from_callable(
        state.amplitudes_at, psi0, T, dt_frame, potential=potential, provenance="eigenbasis", record_id=record_id
    )


def record_free(psi0: WaveFunction, T, dt_frame, record_id="free") -> EvolutionRecord:
    def evaluate(t):
        return propagate_free(psi0, t).amplitudes

    return record_from_callable(
        evaluate, psi0, T, dt_frame, potential=PotentialSpec.free(), provenance="free-spectral", record_id=record_id
    )


def record_from_split_step(psi0: WaveFunction, V, T, dt_frame, dt=1e-3, record_id="split-step") -> EvolutionRecord:
    per_frame = int(round(dt_frame / dt))
    if abs(per_frame * dt - dt_frame) > 1e-12:
        raise ValueError("dt must divide the frame interval")
    times = _frame_times(T, dt_frame)
    frames = [psi0]
    for _ in range(times.size - 1):
        frames.append(propagate_split_step(frames[-1], V, dt, per_frame))
    return EvolutionRecord.from_frames(frames, times, potential=V, provenance="split-step", record_id=record_id)


def record_product(rec_a: EvolutionRecord, rec_b: EvolutionRecord, record_id="product-2d") -> EvolutionRecord:
    """2D record of the product state ``psi_a(q1) psi_b(q2)``; both factors need exact evaluation."""
    if rec_a.exact is None or rec_b.exact is None:
        raise ValueError("product records need exactly evaluable factors")
    if not np.array_equal(rec_a.times, rec_b.times):
        raise ValueError("factor records must share frame times")
    grid = Grid(2, (rec_a.grid.extent[0], rec_b.grid.extent[0]), (rec_a.grid.points[0], rec_b.grid.points[0]))

    def evaluate(t):
        return np.multiply.outer(rec_a.exact(t), rec_b.exact(t))

    frames = np.array([evaluate(t) for t in rec_a.times])
    return EvolutionRecord(
        grid,
        rec_a.times,
        frames,
        rec_a.hbar,
        (rec_a.mass[0], rec_b.mass[0]),
        potential=(rec_a.potential, rec_b.potential),
        provenance="product(" + rec_a.provenance + "," + rec_b.provenance + ")",
        record_id=record_id,
        exact=evaluate,
    )


# ---------------------------------------------------------------------------
# Standard suite


def gaussian(grid: Grid, center=0.0, sigma=1.0, phase_slope=0.0, mass=1.0, hbar=1.0) -> WaveFunction:
    """Normalized Gaussian with position spread ``sigma`` (of ``|psi|^2``) and momentum ``hbar*phase_slope``."""
    x = grid.axis(0)
    a = np.exp(-((x - center) ** 2) / (4 * sigma**2) + 1j * phase_slope * x)
    return normalize(WaveFunction(grid, a, mass, hbar))


def eigensystem(potential: PotentialSpec, extent=20.0, points=512, k=8, hbar=1.0, mass=1.0):
    grid = Grid(1, extent, points)
    return solve_eigenbasis(build_hamiltonian(potential, grid, hbar, mass), k)


def harmonic_two_mode(T=5.0, dt_frame=1e-2, extent=20.0, points=512, moduli=(np.sqrt(0.5), np.sqrt(0.5)), phases=(0.0, 0.0)):
    V = PotentialSpec.harmonic(1.0)
    state = SuperpositionState(eigensystem(V, extent, points), (0, 1), moduli, phases)
    return record_from_superposition(state, T, dt_frame, V, record_id="harmonic-2mode")


QUARTIC = PotentialSpec.quartic(0.5, 0.1)
QUARTIC_MODULI = (np.sqrt(0.5), np.sqrt(0.3), np.sqrt(0.2))


def quartic_three_mode_state(extent=20.0, points=512, phases=(0.0, 0.0, 0.0)) -> SuperpositionState:
    return SuperpositionState(eigensystem(QUARTIC, extent, points), (0, 1, 2), QUARTIC_MODULI, phases)


def quartic_three_mode(T=5.0, dt_frame=1e-2, extent=20.0, points=512):
    return record_from_superposition(quartic_three_mode_state(extent, points), T, dt_frame, QUARTIC, record_id="quartic-3mode")


def quartic_ground(T=10.0, dt_frame=1e-2, extent=20.0, points=512):
    state = SuperpositionState(eigensystem(QUARTIC, extent, points), (0,), (1.0,))
    return record_from_superposition(state, T, dt_frame, QUARTIC, record_id="quartic-ground")


FREE_SIGMA = np.sqrt(0.5)  # hbar / (2 m sigma^2) = 1


def free_gaussian(T=5.0, dt_frame=1e-2, extent=64.0, points=1024):
    grid = Grid(1, extent, points)
    return record_free(gaussian(grid, 0.0, FREE_SIGMA), T, dt_frame, record_id="free-gaussian")


def product_2d(T=5.0, dt_frame=5e-2, extent=20.0, points=128):
    V = PotentialSpec.harmonic(1.0)
    es = eigensystem(V, extent, points)
    a = SuperpositionState(es, (0, 1), (np.sqrt(0.5), np.sqrt(0.5)))
    b = SuperpositionState(es, (0, 2), (np.sqrt(0.7), np.sqrt(0.3)), (0.0, np.pi / 3))
    rec_a = record_from_superposition(a, T, dt_frame, V, "axis-1")
    rec_b = record_from_superposition(b, T, dt_frame, V, "axis-2")
    return record_product(rec_a, rec_b, record_id="product-2d")


STANDARD_RECORDS = {
    "free-gaussian": free_gaussian,
    "harmonic-2mode": harmonic_two_mode,
    "quartic-3mode": quartic_three_mode,
    "product-2d": product_2d,
}


def standard_suite(T=5.0, include_2d=True) -> dict[str, EvolutionRecord]:
    return {name: make(T=T) for name, make in STANDARD_RECORDS.items() if include_2d or name != "product-2d"}
