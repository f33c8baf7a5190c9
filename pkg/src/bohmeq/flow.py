"""Bohmian velocity field and guidance-equation integration."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .ensemble import Ensemble, Trajectory
from .grid import Grid, WaveFunction, derivative_array
from .interp import _locate, _weights, bspline_coefficients, evaluate
from .records import EvolutionRecord


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings for the guidance equation.

    ``time_sampling`` selects how the field is evaluated at Runge-Kutta stage
    times: ``"frames"`` blends the two bracketing stored frames linearly,
    ``"exact"`` evaluates the record's closed-form evolution, ``"auto"`` uses
    ``exact`` when the record offers it. Each step of ``dt_flow`` is taken as
    two RK4 half steps; their distance from one full step estimates the local
    error, and members whose estimate exceeds ``refine_tol`` cells are
    re-integrated with bisected steps, at most ``max_refinements`` times.
    """

    dt_flow: float = 1e-3
    node_epsilon: float = 1e-12
    integrator: str = "rk4"
    interpolation: str = "cubic-bspline-space/linear-time"
    time_sampling: str = "auto"
    refine_tol: float = 1e-8
    max_refinements: int = 16
    degenerate_steps: int = 10

    def __post_init__(self):
        if self.integrator != "rk4":
            raise ValueError("only the classic RK4 integrator is provided")
        if not self.dt_flow > 0:
            raise ValueError("dt_flow must be positive")
        if self.time_sampling not in ("auto", "frames", "exact"):
            raise ValueError(f"unknown time_sampling {self.time_sampling!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    components: np.ndarray  # (dim, *grid.shape)
    epsilon: float


def velocity_components(a: np.ndarray, grid: Grid, hbar, mass, epsilon=1e-12) -> np.ndarray:
    """``v_k = (hbar/m_k) Im(conj(psi) d_k psi) / (|psi|^2 + eps max|psi|^2)``.

    The current does not depend on a global phase, so ``psi`` is first rotated
    to make ``sum(psi^2)`` real. For a real state times a phase this leaves the
    imaginary part at rounding level and keeps FFT round-off out of ``v``.
    """
    s = np.sum(a * a)
    if s != 0:
        a = a * np.exp(-0.5j * np.angle(s))
    rho = a.real * a.real + a.imag * a.imag
    denom = rho + epsilon * rho.max()
    out = np.empty((grid.dim,) + tuple(grid.shape))
    for k in range(grid.dim):
        d = derivative_array(a, grid, k, 1)
        out[k] = (hbar / mass[k]) * (a.real * d.imag - a.imag * d.real) / denom
    return out


def velocity_field(psi: WaveFunction, epsilon: float = 1e-12) -> VelocityField:
    comps = velocity_components(psi.amplitudes, psi.grid, psi.hbar, psi.mass, epsilon)
    return VelocityField(psi.grid, comps, epsilon)


# ---------------------------------------------------------------------------
# Field source: B-spline coefficients of the velocity at arbitrary times


class _FieldSource:
    def __init__(self, record: EvolutionRecord, mode: str, epsilon: float):
        if mode == "auto":
            mode = "exact" if record.exact is not None else "frames"
        if mode == "exact" and record.exact is None:
            raise ValueError("record offers no exact evaluation")
        self.record = record
        self.mode = mode
        self.epsilon = epsilon
        self.grid = record.grid
        self._frame_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._time_cache: OrderedDict = OrderedDict()

    def _fields(self, a):
        comps = velocity_components(a, self.grid, self.record.hbar, self.record.mass, self.epsilon)
        rho = a.real * a.real + a.imag * a.imag
        return np.ascontiguousarray(bspline_coefficients(comps, self.grid)), (rho / rho.max()).ravel()

    def _frame(self, j):
        if j not in self._frame_cache:
            self._frame_cache[j] = self._fields(self.record.frames[j])
        return self._frame_cache[j]

    def check_range(self, t0, t1):
        if self.mode == "frames":
            lo, hi = self.record.times[0], self.record.times[-1]
            tol = 1e-9 * max(1.0, abs(hi))
            if t0 < lo - tol or t1 > hi + tol:
                raise ValueError(f"interval [{t0}, {t1}] not covered by frames [{lo}, {hi}]")

    def at(self, t: float):
        hit = self._time_cache.get(t)
        if hit is not None:
            return hit
        if self.mode == "exact":
            value = self._fields(self.record.exact(t))
        else:
            times = self.record.times
            tol = 1e-9 * max(1.0, abs(times[-1]))
            if t < times[0] - tol or t > times[-1] + tol:
                raise ValueError(f"t={t} outside frame range [{times[0]}, {times[-1]}]")
            j = int(np.searchsorted(times, t, side="right")) - 1
            j = min(max(j, 0), times.size - 1)
            if j == times.size - 1 or t <= times[j]:
                value = self._frame(j)
            else:
                alpha = (t - times[j]) / (times[j + 1] - times[j])
                ca, ra = self._frame(j)
                cb, rb = self._frame(j + 1)
                value = ((1 - alpha) * ca + alpha * cb, (1 - alpha) * ra + alpha * rb)
        self._time_cache[t] = value
        if len(self._time_cache) > 16:
            self._time_cache.popitem(last=False)
        return value


def velocity_at(frames: EvolutionRecord, t: float, q) -> np.ndarray:
    """Velocity at configurations ``q`` (N, dim): cubic in space, linear between bracketing frames."""
    source = _FieldSource(frames, "frames", 1e-12)
    coef, _ = source.at(float(t))
    q = np.asarray(q, dtype=float).reshape(-1, frames.grid.dim)
    return evaluate(coef, frames.grid, q)


# ---------------------------------------------------------------------------
# RK4 kernels


@njit(cache=True, inline="always")
def _v1(coef, x, x0, h, n):
    i, s = _locate(x, x0, h, n)
    w0, w1, w2, w3 = _weights(s)
    return w0 * coef[0, (i - 1) % n] + w1 * coef[0, i] + w2 * coef[0, (i + 1) % n] + w3 * coef[0, (i + 2) % n]


@njit(cache=True, inline="always")
def _v2(coef, x, y, x0, y0, hx, hy, n1, n2):
    i, s = _locate(x, x0, hx, n1)
    j, r = _locate(y, y0, hy, n2)
    a0, a1, a2, a3 = _weights(s)
    b0, b1, b2, b3 = _weights(r)
    vx = 0.0
    vy = 0.0
    for a in range(4):
        wa = a0 if a == 0 else (a1 if a == 1 else (a2 if a == 2 else a3))
        ii = (i - 1 + a) % n1
        for b in range(4):
            w = wa * (b0 if b == 0 else (b1 if b == 1 else (b2 if b == 2 else b3)))
            jj = (j - 1 + b) % n2
            vx += w * coef[0, ii, jj]
            vy += w * coef[1, ii, jj]
    return vx, vy


@njit(cache=True)
def _rk4_1d(q, dt, c0, ch, c1, x0, h, out):
    n = c0.shape[1]
    for m in range(q.shape[0]):
        x = q[m, 0]
        k1 = _v1(c0, x, x0, h, n)
        k2 = _v1(ch, x + 0.5 * dt * k1, x0, h, n)
        k3 = _v1(ch, x + 0.5 * dt * k2, x0, h, n)
        k4 = _v1(c1, x + dt * k3, x0, h, n)
        out[m, 0] = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


@njit(cache=True)
def _rk4_2d(q, dt, c0, ch, c1, x0, y0, hx, hy, out):
    n1 = c0.shape[1]
    n2 = c0.shape[2]
    for m in range(q.shape[0]):
        x = q[m, 0]
        y = q[m, 1]
        k1x, k1y = _v2(c0, x, y, x0, y0, hx, hy, n1, n2)
        k2x, k2y = _v2(ch, x + 0.5 * dt * k1x, y + 0.5 * dt * k1y, x0, y0, hx, hy, n1, n2)
        k3x, k3y = _v2(ch, x + 0.5 * dt * k2x, y + 0.5 * dt * k2y, x0, y0, hx, hy, n1, n2)
        k4x, k4y = _v2(c1, x + dt * k3x, y + dt * k3y, x0, y0, hx, hy, n1, n2)
        out[m, 0] = x + dt * (k1x + 2.0 * k2x + 2.0 * k3x + k4x) / 6.0
        out[m, 1] = y + dt * (k1y + 2.0 * k2y + 2.0 * k3y + k4y) / 6.0


@njit(cache=True)
def _node_watch(q, rel, lower, spacing, points, eps, counter, limit, flags):
    dim = q.shape[1]
    for m in range(q.shape[0]):
        flat = 0
        for k in range(dim):
            i = int(np.floor((q[m, k] - lower[k]) / spacing[k] + 0.5)) % points[k]
            if i < 0:
                i += points[k]
            flat = flat * points[k] + i
        if rel[flat] < eps:
            counter[m] += 1
            if counter[m] > limit:
                flags[m] = True
        else:
            counter[m] = 0


class _Integrator:
    def __init__(self, record: EvolutionRecord, cfg: FlowConfig):
        self.record = record
        self.cfg = cfg
        self.grid = record.grid
        self.source = _FieldSource(record, cfg.time_sampling, cfg.node_epsilon)
        self.h_min = min(self.grid.spacing)
        self.unresolved = None

    def _kernel(self, q, ta, tb):
        dt = tb - ta
        c0, _ = self.source.at(ta)
        ch, _ = self.source.at(ta + 0.5 * dt)
        c1, _ = self.source.at(tb)
        out = np.empty_like(q)
        g = self.grid
        if g.dim == 1:
            _rk4_1d(q, dt, c0, ch, c1, g.lower[0], g.spacing[0], out)
        else:
            _rk4_2d(q, dt, c0, ch, c1, g.lower[0], g.lower[1], g.spacing[0], g.spacing[1], out)
        return out

    def step(self, q, idx, ta, tb, depth=0):
        """Two half steps over ``[ta, tb]``, bisecting members whose step-doubling error is too large."""
        tm = ta + 0.5 * (tb - ta)
        full = self._kernel(q, ta, tb)
        out = self._kernel(self._kernel(q, ta, tm), tm, tb)
        bad = np.abs(out - full).max(axis=1) > self.cfg.refine_tol * self.h_min
        if bad.any():
            if depth >= self.cfg.max_refinements:
                self.unresolved[idx[bad]] = True
            else:
                sub_idx = idx[bad]
                mid = self.step(np.ascontiguousarray(q[bad]), sub_idx, ta, tm, depth + 1)
                out[bad] = self.step(mid, sub_idx, tm, tb, depth + 1)
        return out

    def run(self, q0: np.ndarray, t0: float, out_times) -> tuple[list[np.ndarray], np.ndarray]:
        """Integrate from ``t0`` and return positions at each of ``out_times`` plus degeneracy flags."""
        dt = self.cfg.dt_flow
        out_times = [float(t) for t in out_times]
        out_steps = []
        for t in out_times:
            s = int(round((t - t0) / dt))
            if s < 0 or abs(s * dt - (t - t0)) > 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"output time {t} is not a whole number of flow steps from {t0}")
            out_steps.append(s)
        if any(b < a for a, b in zip(out_steps, out_steps[1:])):
            raise ValueError("output times must be nondecreasing")
        total = out_steps[-1] if out_steps else 0
        self.source.check_range(t0, t0 + total * dt)

        q = np.array(q0, dtype=float).reshape(-1, self.grid.dim)
        n_members = q.shape[0]
        idx = np.arange(n_members)
        self.unresolved = np.zeros(n_members, dtype=bool)
        counter = np.zeros(n_members, dtype=np.int64)
        flags = np.zeros(n_members, dtype=bool)
        g = self.grid
        lower = np.asarray(g.lower, dtype=float)
        spacing = np.asarray(g.spacing, dtype=float)
        points = np.asarray(g.points, dtype=np.int64)

        results = []
        pending = list(out_steps)
        while pending and pending[0] == 0:
            results.append(q.copy())
            pending.pop(0)
        for j in range(total):
            ta = t0 + j * dt
            tb = t0 + (j + 1) * dt
            q = self.step(q, idx, ta, tb)
            _, rel = self.source.at(tb)
            _node_watch(q, rel, lower, spacing, points, self.cfg.node_epsilon, counter, self.cfg.degenerate_steps, flags)
            while pending and pending[0] == j + 1:
                results.append(q.copy())
                pending.pop(0)
        return results, flags | self.unresolved


def _start(q0, grid: Grid) -> np.ndarray:
    return np.array(q0, dtype=float).reshape(-1, grid.dim)


def trace(ensemble: Ensemble, frames: EvolutionRecord, times, cfg: FlowConfig | None = None, t0: float | None = None) -> Trajectory:
    """Positions of every member at each of ``times`` (multiples of ``dt_flow`` after ``t0``)."""
    cfg = cfg or FlowConfig()
    times = np.asarray(times, dtype=float)
    t0 = float(times[0]) if t0 is None else float(t0)
    integ = _Integrator(frames, cfg)
    start = ensemble.unwrapped if isinstance(ensemble, Ensemble) else _start(ensemble, frames.grid)
    snaps, flags = integ.run(start, t0, times)
    unwrapped = np.array(snaps)
    if isinstance(ensemble, Ensemble):
        flags = flags | ensemble.flags
    return Trajectory(times, frames.grid.wrap(unwrapped), unwrapped, flags)


def advance_trajectory(q0, frames: EvolutionRecord, t0: float, t1: float, cfg: FlowConfig | None = None) -> Trajectory:
    """Integrate one configuration from ``t0`` to ``t1``, recording it at every frame time in between."""
    cfg = cfg or FlowConfig()
    grid = frames.grid
    inside = frames.times[(frames.times > t0) & (frames.times < t1)]
    times = np.unique(np.concatenate(([t0], inside, [t1])))
    if cfg.time_sampling == "frames" or frames.exact is None:
        interval = frames.dt_frame
        ratio = interval / cfg.dt_flow
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_flow must divide the frame interval")
    return trace(Ensemble(_start(q0, grid)), frames, times, cfg, t0=t0)


def evolve_ensemble(ensemble: Ensemble, frames: EvolutionRecord, t0: float, t1: float, cfg: FlowConfig | None = None) -> Ensemble:
    """Carry every member from ``t0`` to ``t1``; member order is preserved."""
    traj = trace(ensemble, frames, [t0, t1], cfg, t0=t0)
    return Ensemble(traj.positions[-1], ensemble.seed, traj.unwrapped[-1], traj.flags)


class BohmianFlow(BaseEstimator):
    """Estimator wrapper around the guidance-equation flow.

    ``fit`` takes an :class:`EvolutionRecord`; ``transform`` maps an ensemble
    (or an ``(N, dim)`` array) at ``t0`` to its configuration at ``t1``.
    """

    def __init__(self, t0=0.0, t1=1.0, dt_flow=1e-3, node_epsilon=1e-12, time_sampling="auto"):
        self.t0 = t0
        self.t1 = t1
        self.dt_flow = dt_flow
        self.node_epsilon = node_epsilon
        self.time_sampling = time_sampling

    def fit(self, X, y=None):
        if not isinstance(X, EvolutionRecord):
            raise TypeError("BohmianFlow.fit expects an EvolutionRecord")
        self.record_ = X
        self.config_ = FlowConfig(dt_flow=self.dt_flow, node_epsilon=self.node_epsilon, time_sampling=self.time_sampling)
        return self

    def transform(self, X):
        if not hasattr(self, "record_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit with an EvolutionRecord first")
        ens = X if isinstance(X, Ensemble) else Ensemble(_start(X, self.record_.grid))
        out = evolve_ensemble(ens, self.record_, self.t0, self.t1, self.config_)
        return out if isinstance(X, Ensemble) else out.positions
