import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risdoa.beamformer import (
    SensorObjective,
    bcgd_schedule,
    build_sensor_objective,
    crlb_min_schedule,
    random_phases,
    random_schedule,
    retract,
    riemannian_ascent,
    riemannian_gradient,
    summed_objective,
    tangent_projection,
)
from risdoa.crlb import build_crlb_surrogate, crlb, fisher_information
from risdoa.geometry import ArrayGeometry
from risdoa.scene import (
    Scenario,
    SensorArray,
    build_sensor_array,
    calibrate_noise_power,
    measurement_operator,
    source_vector,
)

from .conftest import DESK_TARGETS, draw_sensors

seeds = st.integers(0, 2**32 - 1)


def random_psd(size, rng, rank=None):
    rank = rank or size
    a = rng.standard_normal((size, rank)) + 1j * rng.standard_normal((size, rank))
    return a @ a.conj().T


def per_sensor_power(scenario, schedule):
    hx = measurement_operator(build_sensor_array(scenario), schedule) @ source_vector(scenario)
    return np.mean(np.abs(hx.reshape(schedule.slots, -1)) ** 2, axis=0)


class TestSensorObjective:
    def test_trace_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = random_phases(6, rng)
            b, c = random_psd(6, rng), random_psd(6, rng)
            lhs = np.trace(np.diag(w).conj().T @ b @ np.diag(w) @ c)
            rhs = np.vdot(w, (b * c.T) @ w)
            assert abs(lhs - rhs) < 1e-10 * abs(lhs)

    def test_all_ones_case(self):
        sa = SensorArray(np.ones((1, 4), complex), np.ones(1, complex))
        obj = build_sensor_objective(0, sa, 2.0 * np.ones(4))
        assert np.allclose(obj.matrix, 4.0)

    def test_zero_source(self):
        sa = SensorArray(np.ones((2, 4), complex), np.ones(2, complex))
        assert not np.any(build_sensor_objective(1, sa, np.zeros(4)).matrix)

    def test_matches_received_power(self, desk_geometry):
        sc = Scenario(desk_geometry, draw_sensors(7, 8), DESK_TARGETS)
        sa, c = build_sensor_array(sc), source_vector(sc)
        w = random_phases(100, np.random.default_rng(1))
        for j in (0, 5):
            obj = build_sensor_objective(j, sa, c)
            assert obj.value(w) == pytest.approx(abs(sa.weighted[j] @ (w * c)) ** 2, rel=1e-10)

    def test_non_hermitian_rejected(self):
        with pytest.raises(ValueError):
            SensorObjective(np.array([[1, 2], [0, 1]], complex))

    def test_sensor_index_checked(self):
        sa = SensorArray(np.ones((2, 4), complex), np.ones(2, complex))
        with pytest.raises(IndexError):
            build_sensor_objective(2, sa, np.ones(4))


class TestManifold:
    @given(seeds)
    def test_tangency_and_feasibility(self, seed):
        rng = np.random.default_rng(seed)
        w = random_phases(9, rng)
        g = rng.standard_normal(9) + 1j * rng.standard_normal(9)
        r = tangent_projection(w, g)
        assert np.max(np.abs((r * w.conj()).real)) < 1e-12
        assert np.max(np.abs(np.abs(retract(w + 0.3 * r)) - 1)) < 1e-12

    @given(seeds, st.floats(0, 2 * np.pi))
    def test_global_phase_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        obj = SensorObjective(random_psd(5, rng))
        w = random_phases(5, rng)
        assert obj.value(np.exp(1j * c) * w) == pytest.approx(obj.value(w), rel=1e-10)

    def test_rank_one_reaches_optimum(self):
        rng = np.random.default_rng(2)
        v = random_phases(64, rng)
        obj = SensorObjective(np.outer(v, v.conj()))
        for _ in range(10):
            rep = riemannian_ascent(obj, random_phases(64, rng), max_iters=50)
            assert rep.iterates[-1] >= 0.999 * 64 ** 2
            assert np.all(np.diff(rep.iterates) >= 0)
            assert np.max(np.abs(np.abs(rep.final_point) - 1)) < 1e-10

    def test_identity_stops_immediately(self):
        obj = SensorObjective(np.eye(8, dtype=complex))
        start = random_phases(8, np.random.default_rng(3))
        rep = riemannian_ascent(obj, start)
        assert rep.iterates == [8.0]
        assert np.array_equal(rep.final_point, start)

    def test_random_psd_beats_sampling(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            obj = SensorObjective(random_psd(16, rng))
            best = max(obj.value(random_phases(16, rng)) for _ in range(1000))
            rep = riemannian_ascent(obj, random_phases(16, rng), max_iters=200)
            assert rep.iterates[-1] >= best

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_monotone_on_random_psd(self, seed):
        rng = np.random.default_rng(seed)
        obj = SensorObjective(random_psd(12, rng, rank=3))
        rep = riemannian_ascent(obj, random_phases(12, rng), max_iters=30)
        assert np.all(np.diff(rep.iterates) >= -1e-9 * abs(rep.iterates[-1]))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        r = random_psd(6, rng)
        w = random_phases(6, rng)
        rgrad, egrad = riemannian_gradient(lambda x: r @ x, w)
        # directional derivative along a tangent curve w * exp(j t u)
        u = rng.standard_normal(6)
        f = lambda x: np.vdot(x, r @ x).real
        h = 1e-6
        fd = (f(w * np.exp(1j * h * u)) - f(w * np.exp(-1j * h * u))) / (2 * h)
        assert fd == pytest.approx(np.real(np.vdot(egrad, 1j * u * w)), rel=1e-6)
        assert np.real(np.vdot(rgrad, 1j * u * w)) == pytest.approx(fd, rel=1e-6)

    def test_unit_modulus_start_required(self):
        obj = SensorObjective(np.eye(2, dtype=complex))
        with pytest.raises(ValueError):
            riemannian_ascent(obj, np.array([1.0, 0.5]))


class TestBcgd:
    def test_single_objective_slots_converge(self):
        rng = np.random.default_rng(6)
        v = random_phases(16, rng)
        obj = SensorObjective(np.outer(v, v.conj()))
        sched = bcgd_schedule([obj], 4, random_phases(16, rng), inner_iters=50)
        w = sched.phase_vectors
        aligned = w * np.conj(w[:, :1])
        assert np.allclose(aligned[-1], aligned[-2], atol=1e-6)

    def test_identical_objectives_double_iterations(self):
        rng = np.random.default_rng(7)
        obj = SensorObjective(random_psd(10, rng, rank=2))
        start = random_phases(10, rng)
        a = bcgd_schedule([obj, obj], 3, start, inner_iters=4, tol=0)
        b = bcgd_schedule([obj], 3, start, inner_iters=8, tol=0)
        assert np.allclose(a.phase_vectors, b.phase_vectors, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        objs = [SensorObjective(random_psd(10, rng, rank=1)) for _ in range(3)]
        start = random_phases(10, rng)
        assert np.array_equal(bcgd_schedule(objs, 3, start).phase_vectors,
                              bcgd_schedule(objs, 3, start).phase_vectors)

    def test_perturbation_needs_rng(self):
        obj = SensorObjective(np.eye(2, dtype=complex))
        with pytest.raises(ValueError):
            bcgd_schedule([obj], 2, np.ones(2, complex), perturbation=0.1)

    @pytest.mark.xfail(strict=True, reason="near-converged rank-one ascents leave the running point "
                       "beamed at the last sensors of the sweep; mean power rises but the weakest "
                       "sensor falls below the random-schedule level")
    def test_min_sensor_power_beats_random(self):
        geometry = ArrayGeometry.half_wavelength(10, 10)
        gains = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            sc = Scenario(geometry, draw_sensors(100 + seed, 10), DESK_TARGETS, snapshots=4)
            sa, c = build_sensor_array(sc), source_vector(sc)
            objs = [build_sensor_objective(j, sa, c) for j in range(sc.sensor_count)]
            opt = bcgd_schedule(objs, sc.snapshots, random_phases(100, rng), inner_iters=10)
            rnd = random_schedule(sc.snapshots, 100, rng)
            gains.append((per_sensor_power(sc, opt).min(), per_sensor_power(sc, rnd).min()))
        gains = np.array(gains)
        assert gains[:, 0].mean() > gains[:, 1].mean()


class TestRandomSchedule:
    def test_unit_modulus_and_reproducible(self):
        a = random_schedule(3, 7, np.random.default_rng(9))
        b = random_schedule(3, 7, np.random.default_rng(9))
        assert np.array_equal(a.phase_vectors, b.phase_vectors)
        assert np.allclose(np.abs(a.phase_vectors), 1)

    def test_zero_mean(self):
        s = random_schedule(1000, 100, np.random.default_rng(10))
        assert abs(np.mean(s.phase_vectors)) < 0.02


class TestCrlbMinSchedule:
    def test_identity_surrogate_is_flat(self):
        start = random_phases(12, np.random.default_rng(11))
        sched, rep = crlb_min_schedule(np.eye(12, dtype=complex), 3, start=start)
        assert rep.iterates == [pytest.approx(12.0)]
        assert sched.phase_vectors.shape == (3, 4)

    def test_rank_one_descent_monotone(self):
        rng = np.random.default_rng(12)
        v = random_phases(20, rng)
        sched, rep = crlb_min_schedule(np.outer(v, v.conj()), 4, inner_iters=50, rng=rng)
        assert np.all(np.diff(rep.iterates) <= 0)
        assert rep.iterates[-1] < rep.iterates[0]
        assert np.max(np.abs(np.abs(sched.phase_vectors) - 1)) < 1e-10

    def test_block_form_matches_dense(self):
        rng = np.random.default_rng(13)

        class Block:
            block = random_psd(5, rng, rank=2)

        start = random_phases(15, rng)
        a, _ = crlb_min_schedule(Block, 3, inner_iters=20, start=start)
        b, _ = crlb_min_schedule(np.kron(np.eye(3), Block.block), 3, inner_iters=20, start=start)
        assert np.allclose(a.phase_vectors, b.phase_vectors, atol=1e-10)

    def test_non_hermitian_rejected(self):
        with pytest.raises(ValueError):
            crlb_min_schedule(np.triu(np.ones((4, 4))) + 0j, 2, start=np.ones(4, complex))

    @pytest.mark.xfail(strict=True, reason="descending the pseudoinverse surrogate lowers it by orders "
                       "of magnitude without lowering tr(F^-1); the quadratic form is not a bound on it")
    def test_beats_random_crlb_on_average(self, desk_geometry):
        sc = Scenario(desk_geometry, draw_sensors(7, 8), DESK_TARGETS)
        sa = build_sensor_array(sc)
        sigma2 = calibrate_noise_power(sc)
        surrogate = build_crlb_surrogate(sc.targets, sc.amplitudes, sa, desk_geometry, sc.snapshots, sigma2)
        opt, rnd = [], []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            sched, _ = crlb_min_schedule(surrogate, sc.snapshots, 100, rng=rng)
            for s, out in ((sched, opt), (random_schedule(sc.snapshots, 100, rng), rnd)):
                fim = fisher_information(measurement_operator(sa, s), sc.targets, sc.amplitudes,
                                         sigma2, desk_geometry)
                out.append(crlb(fim))
        assert np.mean(opt) <= np.mean(rnd)


class TestBcgdVersusSummed:
    @pytest.mark.xfail(strict=True, reason="with chained warm starts BCGD ends near the last sensor's "
                       "beam, so its per-sensor powers are less balanced than the summed objective's")
    def test_power_balance(self, desk_geometry):
        """Per-sensor power spread: BCGD against ascent on the summed objective."""
        rows = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            sc = Scenario(desk_geometry, draw_sensors(200 + seed, 8), DESK_TARGETS, snapshots=1)
            sa, c = build_sensor_array(sc), source_vector(sc)
            objs = [build_sensor_objective(j, sa, c) for j in range(sc.sensor_count)]
            start = random_phases(100, rng)
            bcgd = bcgd_schedule(objs, 1, start, inner_iters=10)
            # same total ascent budget for the summed objective
            summed = riemannian_ascent(summed_objective(objs), start, max_iters=10 * len(objs)).final_point
            pb = per_sensor_power(sc, bcgd)
            ps = per_sensor_power(sc, type(bcgd)(summed[None, :]))
            rows.append((np.var(pb / pb.mean()), np.var(ps / ps.mean()), pb.min(), ps.min()))
        rows = np.array(rows)
        print(f"normalized power variance bcgd={rows[:, 0].mean():.3f} summed={rows[:, 1].mean():.3f}; "
              f"min-sensor power bcgd={rows[:, 2].mean():.3e} summed={rows[:, 3].mean():.3e}")
        assert rows[:, 0].mean() < rows[:, 1].mean()
        assert rows[:, 2].mean() >= 0.95 * rows[:, 3].mean()
