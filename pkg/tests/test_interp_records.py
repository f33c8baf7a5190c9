import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmeq.ensemble import Ensemble
from bohmeq.grid import Grid, WaveFunction
from bohmeq.interp import bspline_coefficients, evaluate, interpolate
from bohmeq.records import (
    EvolutionRecord,
    free_gaussian,
    harmonic_two_mode,
    product_2d,
    record_from_split_step,
    standard_suite,
)
from bohmeq.propagator import PotentialSpec


class TestInterpolation:
    def test_reproduces_nodes_1d(self, rng):
        g = Grid.uniform(10.0, 64)
        v = rng.normal(size=64)
        assert np.abs(interpolate(v, g, g.axis(0)[:, None]) - v).max() <= 1e-12

    def test_reproduces_nodes_2d(self, rng):
        g = Grid(2, (10.0, 8.0), (64, 128))
        v = rng.normal(size=(64, 128))
        X, Y = g.mesh()
        q = np.column_stack((X.ravel(), Y.ravel()))
        assert np.abs(interpolate(v, g, q) - v.ravel()).max() <= 1e-11

    @settings(max_examples=30, deadline=None)
    @given(q=st.floats(-50, 50))
    def test_smooth_periodic_accuracy(self, q):
        g = Grid.uniform(10.0, 128)
        f = lambda x: np.sin(2 * np.pi * x / 10) + 0.5 * np.cos(4 * np.pi * x / 10)
        got = interpolate(f(g.axis(0)), g, np.array([[q]]))[0]
        assert got == pytest.approx(f(q), abs=1e-5)

    def test_vector_coefficients(self, rng):
        g = Grid.uniform(10.0, 64)
        v = rng.normal(size=(2, 64))
        c = bspline_coefficients(v, g)
        q = rng.uniform(-5, 5, size=(7, 1))
        out = evaluate(c, g, q)
        assert out.shape == (7, 2)
        assert np.allclose(out[:, 1], interpolate(v[1], g, q))


class TestRecords:
    def test_unitarity_certificate(self):
        g = Grid.uniform(10.0, 64)
        a = np.ones(64)
        with pytest.raises(ValueError, match="not unitary"):
            EvolutionRecord.from_frames([WaveFunction(g, a), WaveFunction(g, 2 * a)], [0.0, 1.0])

    def test_times_increase(self):
        g = Grid.uniform(10.0, 64)
        psi = WaveFunction(g, np.ones(64))
        with pytest.raises(ValueError):
            EvolutionRecord.from_frames([psi, psi], [1.0, 1.0])

    def test_state_at(self):
        rec = harmonic_two_mode(T=1.0, dt_frame=0.1)
        assert np.array_equal(rec.state_at(0.3).amplitudes, rec.exact(0.3))
        frames_only = EvolutionRecord(rec.grid, rec.times, rec.frames)
        assert np.array_equal(frames_only.state_at(0.3).amplitudes, rec.frames[3])
        with pytest.raises(ValueError):
            frames_only.state_at(0.35)

    def test_split_step_record_matches_exact(self):
        rec = harmonic_two_mode(T=1.0, dt_frame=0.1)
        ss = record_from_split_step(rec.frame(0), PotentialSpec.harmonic(1.0), 1.0, 0.1)
        err = np.sqrt(np.sum(np.abs(ss.frames[-1] - rec.frames[-1]) ** 2) * rec.grid.cell_volume)
        assert err <= 1e-5 and ss.exact is None

    def test_product_record(self):
        rec = product_2d(T=0.5, dt_frame=0.05)
        assert rec.grid.dim == 2 and rec.frames.shape == (11, 128, 128)

    def test_seam_small(self):
        for rec in standard_suite(T=5.0).values():
            a = np.abs(rec.frames)
            edge = np.concatenate([a[(slice(None),) + (0,) * 1 + (Ellipsis,)].ravel(), a[..., 0].ravel()])
            assert edge.max() < 1e-8 * a.max()

    def test_free_gaussian_spreads(self):
        rec = free_gaussian(T=2.0, dt_frame=0.5)
        x = rec.grid.axis(0)
        h = rec.grid.spacing[0]
        var = [np.sum(x**2 * np.abs(f) ** 2) * h for f in rec.frames]
        assert np.allclose(var, 0.5 * (1 + rec.times**2), rtol=1e-8)


class TestEnsemble:
    def test_needs_members(self):
        with pytest.raises(ValueError):
            Ensemble(np.zeros((0, 1)))

    def test_subset_and_flags(self):
        e = Ensemble(np.arange(4.0), seed=3, flags=[True, False, False, True])
        assert e.excluded_fraction == 0.5
        s = e.subset([1, 3])
        assert s.seed == 3 and list(s.flags) == [False, True]
