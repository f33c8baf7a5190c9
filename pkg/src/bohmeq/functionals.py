"""Density functionals ``psi -> p^psi`` and the constants built from them."""

from __future__ import annotations

import math
import re

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin

from .grid import (
    DensityGrid,
    WaveFunction,
    _abs2,
    cdf_function,
    density_of,
)

G_FLOOR = 1e-300


def _total(g: np.ndarray, grid) -> float:
    # correctly rounded, so the total does not depend on element order
    return math.fsum(g.ravel()) * grid.cell_volume


def _derivative_kernel(grid, axis: int) -> np.ndarray:
    """Periodic spectral first-derivative stencil (Nyquist mode dropped)."""
    n = grid.points[axis]
    j = np.arange(1, n)
    out = np.zeros(n)
    out[1:] = (np.pi / grid.extent[axis]) * (-1.0) ** j / np.tan(np.pi * j / n)
    return out


def _cyclic_derivative(a: np.ndarray, grid, axis: int) -> np.ndarray:
    """Spectral derivative as a cyclic convolution summed in a fixed order.

    Every output sees the same sequence of operations, so the result commutes
    exactly with whole-cell shifts, which an FFT does not guarantee.
    """
    c = _derivative_kernel(grid, axis)
    out = np.zeros_like(a)
    for m in range(1, c.size):
        out += c[m] * np.roll(a, m, axis=axis)
    return out


def check_wavefunction(psi, dim: int | None = None) -> WaveFunction:
    """Return ``psi`` if it is a :class:`WaveFunction` (of dimension ``dim`` when given)."""
    if not isinstance(psi, WaveFunction):
        raise TypeError(f"expected a WaveFunction, got {type(psi).__name__}")
    if dim is not None and psi.grid.dim != dim:
        raise ValueError(f"this functional needs a {dim}D wave function, got {psi.grid.dim}D")
    return psi


# ---------------------------------------------------------------------------
# Transport measures on (0, 1)


class TransportMeasure:
    """Probability measure ``mu`` on (0, 1) given by its density and distribution function.

    Named measures are ``lebesgue``, ``tilt`` (density ``2u``) and
    ``beta(a,b)``; anything else is a tabulated piecewise-constant density.
    """

    TABLE_CELLS = 4096

    def __init__(self, kind: str = "lebesgue", a: float = 1.0, b: float = 1.0, values=None):
        self.kind = kind
        self.a = float(a)
        self.b = float(b)
        if kind == "tabulated":
            v = np.asarray(values, dtype=float)
            if v.ndim != 1 or v.size < 1 or np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError("tabulated transport density must be a finite nonnegative 1D array")
            total = v.mean()
            if total <= 0:
                raise ValueError("tabulated transport density has zero mass")
            self.values = v / total
            self._cum = np.concatenate(([0.0], np.cumsum(self.values) / v.size))
            self._cum[-1] = 1.0
        elif kind == "beta":
            if not (self.a > 0 and self.b > 0):
                raise ValueError("beta parameters must be positive")
            self.values = None
        elif kind in ("lebesgue", "tilt"):
            self.values = None
        else:
            raise ValueError(f"unknown transport measure {kind!r}")

    @classmethod
    def lebesgue(cls):
        return cls("lebesgue")

    @classmethod
    def tilt(cls):
        return cls("tilt")

    @classmethod
    def beta(cls, a, b):
        return cls("beta", a, b)

    @classmethod
    def tabulated(cls, values):
        return cls("tabulated", values=values)

    @classmethod
    def from_density(cls, fn, cells: int = TABLE_CELLS):
        """Tabulate an arbitrary density ``fn(u)`` at cell midpoints."""
        u = (np.arange(cells) + 0.5) / cells
        return cls.tabulated(fn(u))

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "lebesgue":
            return np.ones_like(u)
        if self.kind == "tilt":
            return 2.0 * u
        if self.kind == "beta":
            return stats.beta.pdf(u, self.a, self.b)
        idx = np.clip((u * self.values.size).astype(int), 0, self.values.size - 1)
        return self.values[idx]

    def cumulative(self, u) -> np.ndarray:
        """``mu((0, u))``."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.kind == "lebesgue":
            return u
        if self.kind == "tilt":
            return u * u
        if self.kind == "beta":
            return stats.beta.cdf(u, self.a, self.b)
        return np.interp(u, np.linspace(0.0, 1.0, self.values.size + 1), self._cum)

    def __str__(self):
        if self.kind == "beta":
            return f"beta({self.a:g},{self.b:g})"
        return self.kind

    def __repr__(self):
        return f"TransportMeasure({str(self)!r})"

    def __eq__(self, other):
        if not isinstance(other, TransportMeasure) or other.kind != self.kind:
            return False
        if self.kind == "tabulated":
            return np.array_equal(self.values, other.values)
        return (self.a, self.b) == (other.a, other.b) or self.kind != "beta"

    def __hash__(self):
        return hash((self.kind, self.a, self.b))

    @classmethod
    def parse(cls, text: str) -> "TransportMeasure":
        text = text.strip()
        if text in ("lebesgue", "tilt"):
            return cls(text)
        m = re.fullmatch(r"beta\(\s*([^,]+?)\s*,\s*([^)]+?)\s*\)", text)
        if m:
            return cls.beta(float(m.group(1)), float(m.group(2)))
        raise ValueError(f"unknown transport measure {text!r}")


# ---------------------------------------------------------------------------
# Functionals


class DensityFunctional(TransformerMixin, BaseEstimator):
    """Base class: a map from wave functions to normalized densities.

    Subclasses define :meth:`g`, the unnormalized density. The estimator is
    stateless, so ``fit`` only validates and ``transform`` maps a wave
    function (or a sequence of them) to :class:`DensityGrid` objects.
    """

    dims: tuple[int, ...] = (1, 2)
    local = True

    def g(self, psi: WaveFunction) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, psi: WaveFunction) -> DensityGrid:
        return eval_density(self, psi)

    def fit(self, X=None, y=None):
        if X is not None:
            for psi in _as_list(X):
                self._check(psi)
        return self

    def __sklearn_is_fitted__(self):
        return True

    def transform(self, X):
        if isinstance(X, WaveFunction):
            return eval_density(self, X)
        return [eval_density(self, psi) for psi in _as_list(X)]

    def _check(self, psi):
        check_wavefunction(psi)
        if psi.grid.dim not in self.dims:
            raise ValueError(f"{self.label()} is defined for dim in {self.dims}, got {psi.grid.dim}")
        return psi

    def label(self) -> str:
        return to_string(self)


def _as_list(X):
    if hasattr(X, "frames") and hasattr(X, "frame"):
        return [X.frame(j) for j in range(X.n_frames)]
    return list(X)


class Equilibrium(DensityFunctional):
    """``p_e = |psi|^2 / int |psi|^2``."""

    def g(self, psi):
        return _abs2(psi.amplitudes)


class PowerLaw(DensityFunctional):
    """``g = |psi|^alpha``; ``alpha = 2`` coincides with :class:`Equilibrium`."""

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def g(self, psi):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        rho = _abs2(psi.amplitudes)
        return rho if self.alpha == 2 else rho ** (0.5 * self.alpha)


class GradientMix(DensityFunctional):
    """``g = |psi|^2 + beta * sum_k lambda^2 |d_k psi|^2``."""

    def __init__(self, beta: float = 0.25, length_scale: float = 1.0):
        self.beta = beta
        self.length_scale = length_scale

    def g(self, psi):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        a = psi.amplitudes
        out = _abs2(a)
        if self.beta:
            grad = sum(_abs2(_cyclic_derivative(a, psi.grid, k)) for k in range(psi.grid.dim))
            out = out + self.beta * self.length_scale**2 * grad
        return out


class CdfTransport(DensityFunctional):
    """Image of ``mu`` under the inverse of the equilibrium distribution function (1D only).

    The density is ``mu_density(F) p_e`` evaluated at the nodes, so
    ``mu = lebesgue`` reproduces :class:`Equilibrium`.
    """

    dims = (1,)
    local = False

    def __init__(self, mu="tilt"):
        self.mu = mu

    @property
    def measure(self) -> TransportMeasure:
        return self.mu if isinstance(self.mu, TransportMeasure) else TransportMeasure.parse(str(self.mu))

    def g(self, psi):
        return cdf_transport_density(self.measure, psi).values


def eval_density(f: DensityFunctional, psi: WaveFunction) -> DensityGrid:
    """Normalized density ``N_g g^psi`` with ``N_g = 1 / sum(g) h^dim``."""
    f._check(psi)
    g = np.asarray(f.g(psi), dtype=float)
    total = _total(g, psi.grid)
    if not total > G_FLOOR:
        raise ValueError(f"{f.label()}: g is identically ~0 (integral {total:.3e})")
    return DensityGrid(psi.grid, g / total, normalized=True)


def normalizer(f: DensityFunctional, psi: WaveFunction) -> float:
    """``N_g^psi = 1 / int g^psi``."""
    f._check(psi)
    total = _total(np.asarray(f.g(psi), dtype=float), psi.grid)
    if not total > G_FLOOR:
        raise ValueError(f"{f.label()}: g is identically ~0 (integral {total:.3e})")
    return 1.0 / total


def cdf_F(psi: WaveFunction, q) -> np.ndarray:
    """Equilibrium probability of ``(-L/2, q)``; linear inside each cell."""
    check_wavefunction(psi, dim=1)
    return cdf_function(density_of(psi).normalize())(q)


def node_cdf(p: DensityGrid) -> np.ndarray:
    """Distribution function of a normalized 1D density at the grid nodes, by spectral antiderivative."""
    grid = p.grid
    n = grid.points[0]
    v = p.values
    k = 2 * np.pi * np.fft.rfftfreq(n, d=grid.spacing[0])
    spec = np.fft.rfft(v - v.mean())
    spec[0] = 0.0
    spec[1:] /= 1j * k[1:]
    spec[-1] = 0.0
    anti = np.fft.irfft(spec, n=n)
    x = grid.axis(0)
    return (x - x[0]) * v.mean() + anti - anti[0]


def cdf_transport_density(mu: TransportMeasure, psi: WaveFunction) -> DensityGrid:
    """``p = mu_density(F) p_e`` at the nodes, renormalized.

    ``F`` at the nodes comes from a spectral antiderivative of ``p_e``. Where
    the density of ``mu`` is singular (``F`` at 0 or 1 for some beta laws) the
    node takes the ``mu``-average over the ``u``-interval of its cell.
    """
    check_wavefunction(psi, dim=1)
    p = density_of(psi).normalize()
    F = np.clip(node_cdf(p), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = mu.density(F)
    bad = ~np.isfinite(dens)
    if bad.any():
        m = p.values[bad] * psi.grid.cell_volume
        dens[bad] = (mu.cumulative(F[bad] + m / 2) - mu.cumulative(F[bad] - m / 2)) / m
    g = np.maximum(dens * p.values, 0.0)
    return DensityGrid(psi.grid, g / (g.sum() * psi.grid.cell_volume), normalized=True)


def estimate_h(f: DensityFunctional, frames) -> tuple[np.ndarray, np.ndarray]:
    """``h = d/dt ln N_g`` across the frames of a record (centered differences inside, one-sided at the ends)."""
    times = np.asarray(frames.times, dtype=float)
    if times.size < 2:
        raise ValueError("estimate_h needs at least two frames")
    log_n = np.array([np.log(normalizer(f, frames.frame(j))) for j in range(times.size)])
    return times, np.gradient(log_n, times)


# ---------------------------------------------------------------------------
# String form used by configs and the command line

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _kwargs(body: str) -> dict[str, str]:
    out = {}
    if not body:
        return out
    # split on commas that are not inside parentheses
    depth, start = 0, 0
    parts = []
    for i, ch in enumerate(body):
        depth += ch == "("
        depth -= ch == ")"
        if ch == "," and depth == 0:
            parts.append(body[start:i])
            start = i + 1
    parts.append(body[start:])
    for part in parts:
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _number(key, value) -> float:
    if not re.fullmatch(_NUM, value):
        raise ValueError(f"{key} must be a number, got {value!r}")
    return float(value)


def parse_functional(text: str) -> DensityFunctional:
    """Build a functional from ``equilibrium``, ``power:alpha=1``, ``gradmix:beta=0.25`` or ``cdf:mu=tilt``."""
    name, _, body = text.strip().partition(":")
    kw = _kwargs(body)
    if name == "equilibrium" and not kw:
        return Equilibrium()
    if name == "power" and set(kw) <= {"alpha"}:
        f = PowerLaw(_number("alpha", kw.get("alpha", "1")))
        if not f.alpha > 0:
            raise ValueError("alpha must be positive")
        return f
    if name == "gradmix" and set(kw) <= {"beta", "lambda"}:
        f = GradientMix(_number("beta", kw.get("beta", "0.25")), _number("lambda", kw.get("lambda", "1")))
        if f.beta < 0:
            raise ValueError("beta must be nonnegative")
        return f
    if name == "cdf" and set(kw) <= {"mu"}:
        return CdfTransport(TransportMeasure.parse(kw.get("mu", "tilt")))
    raise ValueError(f"unrecognized functional {text!r}")


def to_string(f: DensityFunctional) -> str:
    if isinstance(f, Equilibrium):
        return "equilibrium"
    if isinstance(f, PowerLaw):
        return f"power:alpha={f.alpha:g}"
    if isinstance(f, GradientMix):
        s = f"gradmix:beta={f.beta:g}"
        return s if f.length_scale == 1 else s + f",lambda={f.length_scale:g}"
    if isinstance(f, CdfTransport):
        return f"cdf:mu={f.measure}"
    return type(f).__name__
