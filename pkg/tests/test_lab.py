import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bohmeq.ensemble import Ensemble, Trajectory
from bohmeq.flow import FlowConfig, trace
from bohmeq.functionals import CdfTransport, Equilibrium, GradientMix, PowerLaw
from bohmeq.grid import DensityGrid, Grid, cdf_function, density_of, sample_from_density
from bohmeq.lab import (
    DensityUnderflowWarning,
    EquivarianceReport,
    bin_density,
    check_equivariance,
    constant_of_motion_F,
    constant_of_motion_G,
    continuity_residual,
    continuity_residual_series,
    count_crossings,
    ergodic_time_average,
    histogram_l1,
    ks_distance,
    l1_distance,
    phase_average,
)
from bohmeq.propagator import PotentialSpec, SuperpositionState
from bohmeq.records import (
    FREE_SIGMA,
    eigensystem,
    free_gaussian,
    harmonic_two_mode,
    product_2d,
    quartic_ground,
    quartic_three_mode_state,
)

CFG = FlowConfig(dt_flow=0.02)


@pytest.fixture(scope="module")
def harmonic():
    return harmonic_two_mode(T=2.0, dt_frame=0.02)


@pytest.fixture(scope="module")
def ground():
    return quartic_ground(T=2.0, dt_frame=0.1)


def _uniform(n=64, L=10.0):
    g = Grid.uniform(L, n)
    return DensityGrid(g, np.ones(n)).normalize()


class TestKS:
    @pytest.mark.parametrize("N", [10, 1000])
    def test_quantile_samples(self, N):
        p = _uniform()
        x = -5.0 + 10.0 * (np.arange(N) + 0.5) / N
        assert ks_distance(x, p) == pytest.approx(1 / (2 * N), abs=1e-12)

    @pytest.mark.parametrize("N", [10, 100, 10_000])
    def test_degenerate_mass(self, N):
        assert ks_distance(np.full(N, -5.0), _uniform()) >= 1 - 1 / N

    def test_sampling_bound(self, gaussian1):
        p = density_of(gaussian1).normalize()
        # the 95% Kolmogorov bound 1.36 / sqrt(N) is 0.0043 at N = 1e5
        for seed in range(5):
            assert ks_distance(sample_from_density(p, 100_000, seed), p) <= 0.01

    def test_callable_target(self):
        p = _uniform()
        x = np.linspace(-4, 4, 101)
        assert ks_distance(x, cdf_function(p)) == ks_distance(x, p)

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_distance(np.zeros((0, 1)), _uniform())

    def test_rejects_2d(self):
        with pytest.raises(ValueError):
            ks_distance(np.zeros((3, 2)), _uniform())


class TestL1:
    def test_identity(self):
        assert l1_distance(_uniform(), _uniform()) == 0.0

    def test_disjoint(self):
        g = Grid.uniform(10.0, 64)
        a = np.zeros(64)
        b = np.zeros(64)
        a[:10] = 1
        b[30:] = 1
        assert l1_distance(DensityGrid(g, a).normalize(), DensityGrid(g, b).normalize()) == pytest.approx(2.0, abs=1e-12)

    def test_half_box(self):
        g = Grid.uniform(10.0, 64)
        r = np.zeros(64)
        r[:32] = 2.0 / 10.0
        assert l1_distance(_uniform(), DensityGrid(g, r, normalized=True)) == pytest.approx(1.0, abs=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            l1_distance(_uniform(64), _uniform(128))

    def test_bin_density_preserves_mass(self):
        g = Grid(2, 10.0, 128)
        X, Y = g.mesh()
        p = DensityGrid(g, np.exp(-(X**2) - 2 * Y**2)).normalize()
        assert bin_density(p).total() == pytest.approx(1.0, abs=1e-12)

    def test_histogram_l1_sampling_scale(self):
        g = Grid(2, 10.0, 128)
        X, Y = g.mesh()
        p = DensityGrid(g, np.exp(-(X**2) - 2 * Y**2)).normalize()
        assert histogram_l1(sample_from_density(p, 100_000, 3), p) <= 0.05


class TestReport:
    def _report(self):
        return EquivarianceReport("equilibrium", "r", 1, 10, 3, {"ks": 0.01}, [1.0], [0.005], [0.02], None, 0.0, 0.0, "pass", 0)

    def test_ranges(self):
        with pytest.raises(ValueError):
            EquivarianceReport("f", "r", 1, 1, 0, {}, [1.0], [1.5], [0.1])
        with pytest.raises(ValueError):
            EquivarianceReport("f", "r", 1, 1, 0, {}, [1.0], [0.1], [2.5])
        with pytest.raises(ValueError):
            EquivarianceReport("f", "r", 1, 1, 0, {}, excluded_fraction=1.0)

    def test_json_round_trip(self, tmp_path):
        r = self._report()
        text = r.to_json(tmp_path / "r.json")
        assert EquivarianceReport.from_json(text) == r
        data = json.loads((tmp_path / "r.json").read_text())
        assert {"functional", "record_id", "N", "seed", "thresholds", "ks", "l1", "verdict"} <= set(data)

    def test_csv(self, tmp_path):
        self._report().to_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines() == ["t,ks,l1", "1.0,0.005,0.02"]


class TestCheckEquivariance:
    def test_equilibrium_passes(self, harmonic):
        r = check_equivariance(Equilibrium(), harmonic, 20_000, 42, [1.0, 2.0], CFG, ks_tol=0.015)
        assert r.verdict == "pass" and r.excluded_fraction < 1e-3 and r.crossings == 0
        assert r.g_drift == pytest.approx(0.0, abs=1e-9)

    def test_power_law_fails_with_gap(self, harmonic):
        eq = check_equivariance(Equilibrium(), harmonic, 20_000, 42, [1.0, 2.0], CFG)
        r = check_equivariance(PowerLaw(1.0), harmonic, 20_000, 42, [1.0, 2.0], CFG)
        assert r.verdict == "fail"
        assert r.max_ks >= 5 * eq.max_ks

    @pytest.mark.parametrize("f", [Equilibrium(), PowerLaw(1.0), PowerLaw(4.0), GradientMix(0.25), CdfTransport("tilt")])
    def test_real_eigenstate_trivial(self, ground, f):
        r = check_equivariance(f, ground, 20_000, 1, [1.0, 2.0], FlowConfig(dt_flow=0.1))
        # sampling bound 1.36 / sqrt(2e4) = 0.0096
        assert r.passed and r.max_ks <= 0.0096

    def test_two_dimensional_uses_l1(self):
        rec = product_2d(T=1.0, dt_frame=0.05)
        r = check_equivariance(Equilibrium(), rec, 100_000, 42, [1.0], FlowConfig(dt_flow=0.01))
        assert r.ks == [None] and r.passed and r.max_l1 <= 0.05

    def test_invalid_when_many_excluded(self):
        from bohmeq.grid import WaveFunction
        from bohmeq.records import EvolutionRecord

        g = Grid.uniform(10.0, 128)
        x = g.axis(0)
        a = np.where(np.abs(x) < 1.0, 0.0, np.exp(-((x - 2.5) ** 2)))
        rec = EvolutionRecord.from_frames([WaveFunction(g, a)] * 2, [0.0, 1.0])
        f = PowerLaw(1.0)
        # put 5% of the sampled mass inside the zero interval of psi
        f.g = lambda psi: np.where(np.abs(x) < 0.5, 0.05, 0.0) + np.abs(psi.amplitudes) * 0.95 / np.abs(a).sum()
        r = check_equivariance(f, rec, 2000, 0, [1.0], FlowConfig(dt_flow=0.01))
        assert r.excluded_fraction >= 0.01 and r.verdict == "invalid"

    def test_deterministic(self, harmonic):
        a = check_equivariance(PowerLaw(4.0), harmonic, 2000, 9, [1.0, 2.0], CFG).to_json()
        b = check_equivariance(PowerLaw(4.0), harmonic, 2000, 9, [1.0, 2.0], CFG).to_json()
        assert a == b

    def test_checkpoints_covered(self, harmonic):
        with pytest.raises(ValueError):
            check_equivariance(Equilibrium(), harmonic, 10, 0, [3.0], CFG)


class TestCrossings:
    def test_count(self):
        pos = np.array([[[0.0], [1.0], [2.0]], [[0.5], [0.4], [3.0]]])
        traj = Trajectory(np.array([0.0, 1.0]), pos, pos, np.zeros(3, bool))
        assert count_crossings(traj) == 1

    def test_ties_tolerated(self):
        pos = np.array([[[0.0], [1.0]], [[0.7], [0.7 - 1e-13]]])
        assert count_crossings(Trajectory(np.array([0.0, 1.0]), pos, pos, np.zeros(2, bool))) == 0


class TestContinuityResidual:
    def test_second_order_in_frames(self):
        coarse = continuity_residual(Equilibrium(), harmonic_two_mode(T=1.0, dt_frame=2e-2))
        fine = continuity_residual(Equilibrium(), harmonic_two_mode(T=1.0, dt_frame=1e-2))
        assert 3.5 <= coarse / fine <= 4.5

    @pytest.mark.parametrize("f", [Equilibrium(), PowerLaw(1.0), PowerLaw(4.0), GradientMix(0.25), CdfTransport("tilt")])
    def test_real_eigenstate(self, ground, f):
        assert continuity_residual(f, ground) <= 1e-8

    def test_power_law_gap(self, harmonic):
        assert continuity_residual(PowerLaw(4.0), harmonic) >= 100 * continuity_residual(Equilibrium(), harmonic)

    def test_needs_three_frames(self):
        rec = harmonic_two_mode(T=0.01, dt_frame=0.01)
        with pytest.raises(ValueError):
            continuity_residual(Equilibrium(), rec)

    def test_series_shape(self, harmonic):
        t, r = continuity_residual_series(Equilibrium(), harmonic)
        assert t.size == harmonic.n_frames - 2 == r.size


class TestConstantsOfMotion:
    def test_F_stationary(self, ground):
        ens = sample_from_density(density_of(ground.frame(0)).normalize(), 50, 0)
        traj = trace(ens, ground, ground.times, FlowConfig(dt_flow=0.1))
        assert constant_of_motion_F(ground, traj) <= 1e-9

    def test_F_spreading_gaussian(self):
        rec = free_gaussian(T=2.0, dt_frame=0.1)
        traj = trace(Ensemble([[FREE_SIGMA]]), rec, rec.times, FlowConfig(dt_flow=0.01))
        assert constant_of_motion_F(rec, traj) <= 1e-3

    def test_F_harmonic(self, harmonic):
        ens = sample_from_density(density_of(harmonic.frame(0)).normalize(), 100, 42)
        traj = trace(ens, harmonic, harmonic.times[::10], CFG)
        assert constant_of_motion_F(harmonic, traj) <= 1e-3

    def test_G_equilibrium(self, harmonic):
        ens = sample_from_density(density_of(harmonic.frame(0)).normalize(), 100, 42)
        traj = trace(ens, harmonic, harmonic.times[::10], CFG)
        assert constant_of_motion_G(Equilibrium(), harmonic, traj) <= 1e-9

    def test_G_tilt(self, harmonic):
        ens = sample_from_density(density_of(harmonic.frame(0)).normalize(), 100, 42)
        traj = trace(ens, harmonic, harmonic.times[::10], CFG)
        assert constant_of_motion_G(CdfTransport("tilt"), harmonic, traj) <= 1e-2

    def test_G_power_law_moves_on_superposition(self, harmonic):
        ens = sample_from_density(density_of(harmonic.frame(0)).normalize(), 100, 42)
        traj = trace(ens, harmonic, harmonic.times[::10], CFG)
        assert constant_of_motion_G(PowerLaw(1.0), harmonic, traj) >= 0.1

    def test_G_underflow_flagged(self):
        g = Grid.uniform(10.0, 64)
        from bohmeq.grid import WaveFunction
        from bohmeq.records import EvolutionRecord

        a = np.exp(-(g.axis(0) ** 2) * 40)
        rec = EvolutionRecord.from_frames([WaveFunction(g, a)] * 2, [0.0, 1.0])
        pos = np.array([[[0.0], [4.9]], [[0.0], [4.9]]])
        traj = Trajectory(np.array([0.0, 1.0]), pos, pos, np.zeros(2, bool))
        with pytest.warns(DensityUnderflowWarning):
            drift = constant_of_motion_G(PowerLaw(4.0), rec, traj)
        assert drift == 0.0

    @pytest.mark.slow
    def test_refinement_shrinks_drift(self):
        ens_q = None
        drifts = []
        for dt_flow, n, dt_frame in ((0.04, 256, 0.04), (0.01, 512, 0.01)):
            rec = harmonic_two_mode(T=2.0, dt_frame=dt_frame, points=n)
            if ens_q is None:
                ens_q = sample_from_density(density_of(rec.frame(0)).normalize(), 100, 42).positions
            traj = trace(Ensemble(ens_q), rec, [0.0, 1.0, 2.0], FlowConfig(dt_flow=dt_flow, time_sampling="frames"))
            drifts.append((constant_of_motion_F(rec, traj), constant_of_motion_G(CdfTransport("tilt"), rec, traj)))
        assert drifts[0][0] >= 4 * drifts[1][0]
        assert drifts[0][1] >= 4 * drifts[1][1]


class TestErgodic:
    def test_single_mode(self):
        s = quartic_three_mode_state()
        one = SuperpositionState(s.eigensystem, (2,), (1.0,))
        avg = ergodic_time_average(one, 50.0, 101)
        phi2 = s.eigensystem.eigenvectors[2] ** 2
        assert np.abs(avg.values - phi2).max() <= 1e-12

    def test_commensurate_periods(self):
        es = eigensystem(PotentialSpec.harmonic(1.0), points=512, k=4)
        s = SuperpositionState(es, (0, 2), (np.sqrt(0.6), np.sqrt(0.4)))
        period = 2 * np.pi / (es.eigenvalues[2] - es.eigenvalues[0])
        one = ergodic_time_average(s, period, 401)
        three = ergodic_time_average(s, 3 * period, 1201)
        assert l1_distance(one, three) <= 1e-10

    def test_quartic_equidistribution(self):
        s = quartic_three_mode_state()
        target = phase_average(s)
        a = l1_distance(ergodic_time_average(s, 2000.0, 40_001), target)
        b = l1_distance(ergodic_time_average(s, 4000.0, 80_001), target)
        assert a <= 0.02 and b <= 0.012 and 1.3 <= a / b <= 3.0

    @settings(max_examples=10, deadline=None)
    @given(phases=st.tuples(*[st.floats(0, 2 * np.pi)] * 3))
    def test_normalized(self, phases):
        s = quartic_three_mode_state(phases=phases)
        assert ergodic_time_average(s, 10.0, 51).total() == pytest.approx(1.0, abs=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            ergodic_time_average(quartic_three_mode_state(), 10.0, 1)
