import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risdoa.beamformer import random_schedule
from risdoa.geometry import AngleGrid, AnglePair, ArrayGeometry, build_dictionary, upa_steering
from risdoa.scene import (
    REFERENCE_TARGETS,
    BeamformingSchedule,
    CalibrationError,
    PathLoss,
    Scenario,
    build_sensor_array,
    calibrate_noise_power,
    complex_noise,
    linearized_channel_column,
    measurement_operator,
    path_loss,
    per_sensor_snr,
    received_snr,
    source_vector,
    synthesize_observation,
)

from .conftest import DESK_TARGETS, draw_sensors


@pytest.fixture
def desk(desk_geometry):
    return Scenario(desk_geometry, draw_sensors(7, 8), DESK_TARGETS)


class TestPathLoss:
    def test_reference_distance(self):
        assert path_loss(1.0) == pytest.approx(1e-3)

    def test_default_link(self):
        assert PathLoss().rho == pytest.approx(1e-3 * 10 ** -2.2)

    def test_bad_distance(self):
        with pytest.raises(ValueError):
            path_loss(0.0)


class TestScenario:
    def test_defaults(self, desk):
        assert desk.snapshots == 2 * math.ceil(100 / 8)
        assert np.all(desk.amplitudes == 1)
        assert desk.target_count == 3

    def test_reference_targets_valid(self):
        for t in REFERENCE_TARGETS:
            AnglePair(*t)

    def test_snr_xor_noise(self, desk_geometry):
        with pytest.raises(ValueError):
            Scenario(desk_geometry, [(0, 0)], [(0, 0)], snr_db=None, noise_power=None)
        with pytest.raises(ValueError):
            Scenario(desk_geometry, [(0, 0)], [(0, 0)], snr_db=10, noise_power=1.0)

    def test_amplitude_count(self, desk_geometry):
        with pytest.raises(ValueError):
            Scenario(desk_geometry, [(0, 0)], [(0, 0)], prs_amplitudes=(1, 1))

    def test_rejects_invalid_direction(self, desk_geometry):
        with pytest.raises(ValueError):
            Scenario(desk_geometry, [(70, 70)], [(0, 0)])


class TestSchedule:
    def test_unit_modulus_enforced(self):
        with pytest.raises(ValueError):
            BeamformingSchedule(np.array([[1.0, 0.5]]))

    def test_read_only(self):
        s = BeamformingSchedule.from_phases(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            s.phase_vectors[0, 0] = 1

    def test_phase_round_trip(self):
        phases = np.random.default_rng(0).uniform(-np.pi, np.pi, (3, 4))
        assert np.allclose(BeamformingSchedule.from_phases(phases).phases(), phases)


class TestMeasurementOperator:
    def test_block_structure(self, desk):
        sa = build_sensor_array(desk)
        sched = random_schedule(desk.snapshots, desk.geometry.size, np.random.default_rng(1))
        z = measurement_operator(sa, sched)
        r = desk.sensor_count
        assert z.shape == (desk.snapshots * r, desk.geometry.size)
        for t in (0, 5):
            block = sa.weighted @ np.diag(sched.phase_vectors[t])
            assert np.allclose(z[t * r:(t + 1) * r], block)

    def test_sensor_rows_are_steering(self, desk):
        sa = build_sensor_array(desk)
        assert np.allclose(sa.steering[2], upa_steering(desk.sensors[2], desk.geometry))
        assert np.allclose(sa.weights, desk.rho)


class TestSynthesis:
    def test_noiseless_exact(self, desk):
        sc = desk.with_noise_power(0.0)
        sched = random_schedule(sc.snapshots, sc.geometry.size, np.random.default_rng(2))
        obs = synthesize_observation(sc, sched)
        assert np.allclose(obs.stacked, obs.operator @ source_vector(sc), atol=0)
        assert obs.per_slot.shape == (sc.snapshots, sc.sensor_count)

    def test_snr_calibration_with_schedule(self, desk):
        sched = random_schedule(desk.snapshots, desk.geometry.size, np.random.default_rng(3))
        sigma2 = calibrate_noise_power(desk.with_snr(10.0), sched)
        hx = (measurement_operator(build_sensor_array(desk), sched) @ source_vector(desk))
        per_slot = hx.reshape(desk.snapshots, -1)
        gamma = np.mean([received_snr(h, sigma2) for h in per_slot])
        assert gamma == pytest.approx(10.0, rel=1e-12)
        assert np.sum(per_sensor_snr(per_slot[0], sigma2)) == pytest.approx(received_snr(per_slot[0], sigma2))

    def test_expected_calibration_matches_random_average(self, desk):
        # schedule-free noise power equals the mean received power under random phases
        rng = np.random.default_rng(4)
        sa, c = build_sensor_array(desk), source_vector(desk)
        powers = []
        for _ in range(400):
            sched = random_schedule(1, desk.geometry.size, rng)
            powers.append(np.sum(np.abs(measurement_operator(sa, sched) @ c) ** 2))
        expected = calibrate_noise_power(desk.with_snr(0.0))
        assert np.mean(powers) == pytest.approx(expected, rel=0.1)

    def test_zero_signal_cannot_calibrate(self, desk):
        sc = Scenario(desk.geometry, desk.sensors, desk.targets, prs_amplitudes=(0, 0, 0))
        with pytest.raises(CalibrationError):
            calibrate_noise_power(sc)

    def test_noise_statistics(self):
        rng = np.random.default_rng(5)
        n = complex_noise(200_000, 2.0, rng)
        assert np.var(n.real) == pytest.approx(1.0, rel=0.02)
        assert np.var(n.imag) == pytest.approx(1.0, rel=0.02)
        assert abs(np.mean(n.real * n.imag)) < 0.01

    def test_seeded_reproducible(self, desk):
        sched = random_schedule(desk.snapshots, desk.geometry.size, np.random.default_rng(6))
        a = synthesize_observation(desk, sched, rng=np.random.default_rng(9))
        b = synthesize_observation(desk, sched, rng=np.random.default_rng(9))
        assert np.array_equal(a.stacked, b.stacked)

    def test_snr_rejects_zero_noise(self):
        with pytest.raises(ValueError):
            received_snr(np.ones(3), 0.0)


class TestLinearizedColumn:
    def test_on_grid_equals_exact(self, desk_geometry, default_dictionary):
        target = AnglePair(45.0, -15.0)
        lin = linearized_channel_column(target, default_dictionary, desk_geometry)
        assert np.allclose(lin, upa_steering(target, desk_geometry), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
    def test_taylor_error_is_second_order(self, da, de):
        g = ArrayGeometry.half_wavelength(6, 6)
        grid = AngleGrid()
        d = build_dictionary(grid, grid, g)
        target = AnglePair(30.0 + da, -12.0 + de)
        err = np.linalg.norm(linearized_channel_column(target, d, g) - upa_steering(target, g))
        h = np.hypot(da, de) * np.pi / 180
        # Taylor remainder bound scales with (k d (M-1) h)^2 per axis
        assert err <= 4 * (np.pi * 5 * h) ** 2 * g.size ** 0.5 + 1e-12
