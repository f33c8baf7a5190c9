"""Equivariance experiments: ensemble pushforward, continuity residuals and constants of motion."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .ensemble import Ensemble, Trajectory
from .flow import FlowConfig, trace, velocity_components
from .functionals import DensityFunctional, Equilibrium, cdf_F, eval_density, to_string
from .grid import DensityGrid, Grid, _abs2, cdf_function, cell_edges, derivative_array, sample_from_density
from .interp import interpolate
from .propagator import SuperpositionState
from .records import EvolutionRecord

KS_TOL = 0.01
L1_TOL = 0.05
MAX_EXCLUDED = 0.01
HIST_BINS = 64
G_MEMBERS = 100
NODE_MASK = 1e-6


class DensityUnderflowWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Distances


def _positions(samples) -> np.ndarray:
    if isinstance(samples, Ensemble):
        return samples.positions
    return np.asarray(samples, dtype=float).reshape(len(samples), -1)


def ks_distance(samples, target) -> float:
    """Kolmogorov-Smirnov distance between 1D samples and a target CDF.

    ``target`` is a callable CDF or a 1D :class:`DensityGrid`.
    """
    x = _positions(samples)
    if x.shape[0] == 0:
        raise ValueError("KS distance of an empty ensemble")
    if x.shape[1] != 1:
        raise ValueError("KS distance is defined for 1D ensembles; use histogram_l1 in 2D")
    cdf = cdf_function(target.normalize() if not target.normalized else target) if isinstance(target, DensityGrid) else target
    x = np.sort(x[:, 0])
    n = x.size
    c = np.asarray(cdf(x), dtype=float)
    upper = np.arange(1, n + 1) / n - c
    lower = c - np.arange(n) / n
    return float(min(1.0, max(upper.max(), lower.max(), 0.0)))


def _same_grid(a: Grid, b: Grid) -> bool:
    return a.dim == b.dim and tuple(a.extent) == tuple(b.extent) and tuple(a.points) == tuple(b.points)


def l1_distance(p: DensityGrid, r: DensityGrid) -> float:
    """``sum |p - r| h^dim`` for two densities on the same grid."""
    if not _same_grid(p.grid, r.grid):
        raise ValueError("l1_distance needs densities on the same grid")
    return float(np.abs(p.values - r.values).sum() * p.grid.cell_volume)


def _bin_overlap(grid: Grid, axis: int, bins: int) -> np.ndarray:
    """``(bins, n)`` matrix of the length each grid cell shares with each histogram bin."""
    edges = cell_edges(grid, axis)
    n = grid.points[axis]
    cell_of_segment = np.concatenate((np.arange(n), [0]))
    L = grid.extent[axis]
    bedges = -L / 2 + L * np.arange(bins + 1) / bins
    lo = np.maximum(bedges[:-1, None], edges[None, :-1])
    hi = np.minimum(bedges[1:, None], edges[None, 1:])
    seg = np.clip(hi - lo, 0.0, None)
    out = np.zeros((bins, n))
    for s, c in enumerate(cell_of_segment):
        out[:, c] += seg[:, s]
    return out


def bin_density(p: DensityGrid, bins: int = HIST_BINS) -> DensityGrid:
    """Average of the cell-model density over a ``bins^dim`` histogram grid spanning the same box."""
    grid = p.grid
    coarse = Grid(grid.dim, grid.extent, (bins,) * grid.dim)
    mats = [_bin_overlap(grid, k, bins) for k in range(grid.dim)]
    v = p.values
    if grid.dim == 1:
        mass = mats[0] @ v
    else:
        mass = mats[0] @ v @ mats[1].T
    return DensityGrid(coarse, mass / coarse.cell_volume, normalized=p.normalized)


def histogram_density(samples, grid: Grid, bins: int = HIST_BINS) -> DensityGrid:
    """Normalized histogram of an ensemble on a ``bins^dim`` grid over ``grid``'s box."""
    x = _positions(samples)
    if x.shape[0] == 0:
        raise ValueError("histogram of an empty ensemble")
    coarse = Grid(grid.dim, grid.extent, (bins,) * grid.dim)
    ranges = [(-L / 2, L / 2) for L in grid.extent]
    counts, _ = np.histogramdd(grid.wrap(x), bins=(bins,) * grid.dim, range=ranges)
    return DensityGrid(coarse, counts / (x.shape[0] * coarse.cell_volume), normalized=True)


def histogram_l1(samples, target: DensityGrid, bins: int = HIST_BINS) -> float:
    ref = bin_density(target.normalize() if not target.normalized else target, bins)
    return l1_distance(histogram_density(samples, target.grid, bins), ref)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EquivarianceReport:
    """Metric series of one pushforward experiment together with its verdict."""

    functional: str
    record_id: str
    dim: int
    N: int
    seed: int
    thresholds: dict
    times: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    residual_norm: float | None = None
    g_drift: float | None = None
    excluded_fraction: float = 0.0
    verdict: str = "fail"
    crossings: int | None = None
    flow: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.excluded_fraction < 1.0:
            raise ValueError("excluded_fraction must lie in [0, 1)")
        if any(not 0.0 <= k <= 1.0 for k in self.ks if k is not None):
            raise ValueError("KS values must lie in [0, 1]")
        if any(not 0.0 <= v <= 2.0 + 1e-12 for v in self.l1 if v is not None):
            raise ValueError("L1 values must lie in [0, 2]")

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    @property
    def max_ks(self) -> float | None:
        vals = [k for k in self.ks if k is not None]
        return max(vals) if vals else None

    @property
    def max_l1(self) -> float:
        return max(self.l1)

    @property
    def max_metric(self) -> float:
        """Max KS in 1D, max histogram L1 in 2D."""
        return self.max_ks if self.dim == 1 else self.max_l1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "EquivarianceReport":
        return cls(**json.loads(text))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ks", "l1"])
            for t, k, v in zip(self.times, self.ks, self.l1):
                w.writerow([repr(float(t)), "" if k is None else repr(float(k)), repr(float(v))])


# ---------------------------------------------------------------------------
# Pushforward test


def check_equivariance(
    f: DensityFunctional,
    rec: EvolutionRecord,
    N: int,
    seed: int,
    checkpoints,
    cfg: FlowConfig | None = None,
    ks_tol: float = KS_TOL,
    l1_tol: float = L1_TOL,
    g_members: int = G_MEMBERS,
    with_residual: bool = False,
) -> EquivarianceReport:
    """Sample ``eval_density(f, psi_0)``, carry the sample with the Bohm flow and compare to ``eval_density(f, psi_t)``.

    1D records are scored by KS distance, 2D records by 64-bin-per-axis
    histogram L1; 1D reports also carry the L1 series. Node-degenerate members
    are excluded from the statistics and the report is ``invalid`` when they
    exceed 1% of the ensemble.
    """
    cfg = cfg or FlowConfig()
    t0 = float(rec.times[0])
    checkpoints = [float(t) for t in checkpoints]
    if any(t < t0 or t > rec.t_end + 1e-12 for t in checkpoints):
        raise ValueError("record does not cover every checkpoint")
    ensemble = sample_from_density(eval_density(f, rec.state_at(t0)), N, seed)
    times = sorted(set([t0] + checkpoints))
    traj = trace(ensemble, rec, times, cfg, t0=t0)
    keep = ~traj.flags
    excluded = float(traj.flags.mean())

    ks_series, l1_series = [], []
    for j, t in enumerate(times):
        if t not in checkpoints:
            continue
        target = eval_density(f, rec.state_at(t))
        pts = traj.positions[j][keep]
        ks_series.append(ks_distance(pts, target) if rec.grid.dim == 1 else None)
        l1_series.append(histogram_l1(pts, target))

    crossings = count_crossings(traj) if rec.grid.dim == 1 else None
    members = np.flatnonzero(keep)[:g_members]
    sub = Trajectory(traj.times, traj.positions[:, members], traj.unwrapped[:, members], traj.flags[members])
    g_drift = constant_of_motion_G(f, rec, sub)
    residual = continuity_residual(f, rec) if with_residual else None

    metric = ks_series if rec.grid.dim == 1 else l1_series
    tol = ks_tol if rec.grid.dim == 1 else l1_tol
    if excluded >= MAX_EXCLUDED:
        verdict = "invalid"
    else:
        verdict = "pass" if max(metric) <= tol else "fail"
    return EquivarianceReport(
        functional=to_string(f),
        record_id=rec.record_id,
        dim=rec.grid.dim,
        N=int(N),
        seed=int(seed),
        thresholds={"ks": ks_tol, "l1": l1_tol, "max_excluded": MAX_EXCLUDED, "hist_bins": HIST_BINS},
        times=[t for t in times if t in checkpoints],
        ks=ks_series,
        l1=l1_series,
        residual_norm=residual,
        g_drift=g_drift,
        excluded_fraction=excluded,
        verdict=verdict,
        crossings=crossings,
        flow=cfg.to_dict(),
    )


def count_crossings(traj: Trajectory, tol: float = 1e-12) -> int:
    """Number of adjacent pairs (in initial order) whose 1D order is reversed at some recorded time."""
    if traj.positions.shape[2] != 1:
        raise ValueError("crossings are defined for 1D trajectories")
    x = traj.unwrapped[:, :, 0]
    order = np.argsort(x[0], kind="stable")
    gaps = np.diff(x[:, order], axis=1)
    return int(np.any(gaps < -tol, axis=0).sum())


# ---------------------------------------------------------------------------
# Continuity equation


def continuity_residual_series(f: DensityFunctional, rec: EvolutionRecord, mask: float = NODE_MASK):
    """Masked l2 norm of ``dp/dt + div(v p)`` at every interior frame."""
    if rec.n_frames < 3:
        raise ValueError("continuity residual needs at least three frames")
    grid = rec.grid
    dens = [eval_density(f, rec.frame(j)).values for j in range(rec.n_frames)]
    out = np.empty(rec.n_frames - 2)
    for j in range(1, rec.n_frames - 1):
        a = rec.frames[j]
        dt = rec.times[j + 1] - rec.times[j - 1]
        r = (dens[j + 1] - dens[j - 1]) / dt
        v = velocity_components(a, grid, rec.hbar, rec.mass)
        for k in range(grid.dim):
            r = r + derivative_array(v[k] * dens[j], grid, k, 1).real
        rho = _abs2(a)
        keep = rho >= mask * rho.max()
        out[j - 1] = np.sqrt(np.sum(r[keep] ** 2) * grid.cell_volume)
    return rec.times[1:-1].copy(), out


def continuity_residual(f: DensityFunctional, rec: EvolutionRecord, mask: float = NODE_MASK) -> float:
    """Time-max of the masked continuity residual norm."""
    return float(continuity_residual_series(f, rec, mask)[1].max())


# ---------------------------------------------------------------------------
# Constants of motion


def _trajectory_states(rec: EvolutionRecord, traj: Trajectory):
    for j, t in enumerate(traj.times):
        yield j, rec.state_at(float(t))


def constant_of_motion_F(rec: EvolutionRecord, traj: Trajectory) -> float:
    """``max_t |F(psi_t, Q_t) - F(psi_0, Q_0)|`` over all members."""
    if rec.grid.dim != 1:
        raise ValueError("F is defined in 1D only")
    F0 = None
    drift = 0.0
    for j, psi in _trajectory_states(rec, traj):
        F = cdf_F(psi, traj.positions[j, :, 0])
        if F0 is None:
            F0 = F
        drift = max(drift, float(np.abs(F - F0).max()))
    return drift


def constant_of_motion_G(f: DensityFunctional, rec: EvolutionRecord, traj: Trajectory) -> float:
    """``max_t |ln G(t) - ln G(0)|`` with ``G = p^{psi_t}(Q_t) / p_e^{psi_t}(Q_t)``.

    Both densities are interpolated to the trajectory by cubic B-splines.
    Members where either density falls to ``<= 1e-300`` are dropped with a
    :class:`DensityUnderflowWarning`.
    """
    eq = Equilibrium()
    logs = []
    for j, psi in _trajectory_states(rec, traj):
        q = traj.positions[j]
        p = interpolate(eval_density(f, psi).values, rec.grid, q)
        pe = interpolate(eval_density(eq, psi).values, rec.grid, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs.append(np.where((p > 1e-300) & (pe > 1e-300), np.log(p) - np.log(pe), np.nan))
    logs = np.array(logs)
    bad = np.isnan(logs).any(axis=0)
    if bad.any():
        warnings.warn(
            f"density underflow along {int(bad.sum())} trajectories; they are excluded from the G drift",
            DensityUnderflowWarning,
            stacklevel=2,
        )
    good = logs[:, ~bad]
    if good.size == 0:
        return float("nan")
    return float(np.abs(good - good[0]).max())


# ---------------------------------------------------------------------------
# Quasi-periodic time average


def ergodic_time_average(state: SuperpositionState, T: float, samples: int) -> DensityGrid:
    """Trapezoid average of ``|psi_t|^2`` over ``samples`` evenly spaced times in ``[0, T]``.

    The average is accumulated on the mode coefficients, which is the same
    linear combination of frame densities without materializing the frames.
    """
    if samples < 2 or not T > 0:
        raise ValueError("need T > 0 and at least two samples")
    es = state.eigensystem
    t = np.linspace(0.0, T, samples)
    w = np.full(samples, 1.0 / (samples - 1))
    w[[0, -1]] *= 0.5
    E = state.energies
    c0 = np.asarray(state.moduli) * np.exp(1j * np.asarray(state.phases))
    coeff = c0[None, :] * np.exp(-1j * np.outer(t, E) / es.hbar)
    A = (coeff.T * w) @ coeff.conj()
    modes = es.eigenvectors[list(state.indices)].reshape(len(state.indices), -1)
    avg = np.einsum("jl,jx,lx->x", A.real, modes, modes).reshape(es.grid.shape)
    avg = np.maximum(avg, 0.0)
    return DensityGrid(es.grid, avg / (avg.sum() * es.grid.cell_volume), normalized=True)


def phase_average(state: SuperpositionState) -> DensityGrid:
    """``sum_j c_j^2 phi_j^2``."""
    return DensityGrid(state.eigensystem.grid, state.phase_average_density(), normalized=False).normalize()
