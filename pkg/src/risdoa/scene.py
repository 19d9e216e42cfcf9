"""Scenario description and observation synthesis through the RIS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    DEG,
    AngleGrid,
    AnglePair,
    ArrayGeometry,
    Dictionary,
    nearest_grid_decompose,
    upa_steering,
)

UNIT_MODULUS_TOL = 1e-10

REFERENCE_TARGETS = (
    (-50.5, 8.2),
    (-33.7, -27.9),
    (-13.5, -40.3),
    (9.6, 31.8),
    (30.2, 23.5),
    (46.2, -16.3),
)


class CalibrationError(ValueError):
    """Noise power cannot be derived from an SNR when the signal is zero."""


@dataclass(frozen=True)
class PathLoss:
    exponent: float = 2.2
    reference: float = 1.0
    distance: float = 10.0

    @property
    def rho(self) -> float:
        return path_loss(self.distance, self.reference, self.exponent)


def path_loss(d_t: float, d0: float = 1.0, alpha0: float = 2.2) -> float:
    """Distance-dependent amplitude weight 1e-3 (d_t / d0)^(-alpha0)."""
    if d_t <= 0 or d0 <= 0:
        raise ValueError("distances must be positive")
    return 1e-3 * (d_t / d0) ** (-alpha0)


def _pairs(values):
    return tuple(v if isinstance(v, AnglePair) else AnglePair(*v) for v in values)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to synthesize observations.

    Exactly one of ``snr_db`` and ``noise_power`` is set. ``snapshots``
    defaults to 2 ceil(MN / R): a near-square operator amplifies noise
    through its smallest singular values, so the stack is kept at least
    twice as tall as it is wide.
    """

    geometry: ArrayGeometry
    sensors: tuple
    targets: tuple
    path_loss: PathLoss = PathLoss()
    prs_amplitudes: tuple | None = None
    snapshots: int | None = None
    snr_db: float | None = 10.0
    noise_power: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sensors", _pairs(self.sensors))
        object.__setattr__(self, "targets", _pairs(self.targets))
        if not self.sensors or not self.targets:
            raise ValueError("need at least one sensor and one target")
        if self.prs_amplitudes is None:
            object.__setattr__(self, "prs_amplitudes", (1.0 + 0j,) * len(self.targets))
        else:
            amps = tuple(complex(a) for a in self.prs_amplitudes)
            if len(amps) != len(self.targets):
                raise ValueError("one PRS amplitude per target required")
            object.__setattr__(self, "prs_amplitudes", amps)
        if self.snapshots is None:
            object.__setattr__(
                self, "snapshots", 2 * math.ceil(self.geometry.size / len(self.sensors))
            )
        if self.snapshots < 1:
            raise ValueError("snapshots must be >= 1")
        if (self.snr_db is None) == (self.noise_power is None):
            raise ValueError("set exactly one of snr_db and noise_power")
        if self.noise_power is not None and self.noise_power < 0:
            raise ValueError("noise power must be non-negative")

    @property
    def sensor_count(self):
        return len(self.sensors)

    @property
    def target_count(self):
        return len(self.targets)

    @property
    def rho(self):
        return self.path_loss.rho

    @property
    def amplitudes(self):
        return np.asarray(self.prs_amplitudes, dtype=complex)

    def with_snr(self, snr_db):
        return replace(self, snr_db=snr_db, noise_power=None)

    def with_noise_power(self, noise_power):
        return replace(self, snr_db=None, noise_power=noise_power)


@dataclass(frozen=True)
class SensorArray:
    steering: np.ndarray
    weights: np.ndarray

    @property
    def weighted(self):
        """Xi A_R: steering rows scaled by the per-sensor weights."""
        return self.weights[:, None] * self.steering


@dataclass(frozen=True)
class BeamformingSchedule:
    """T unit-modulus RIS phase vectors, one row per time slot."""

    phase_vectors: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.phase_vectors, dtype=complex))
        if np.max(np.abs(np.abs(w) - 1.0)) > UNIT_MODULUS_TOL:
            raise ValueError("schedule entries must have unit modulus")
        w.setflags(write=False)
        object.__setattr__(self, "phase_vectors", w)

    @property
    def slots(self):
        return self.phase_vectors.shape[0]

    @property
    def size(self):
        return self.phase_vectors.shape[1]

    @classmethod
    def from_phases(cls, phases):
        return cls(np.exp(1j * np.asarray(phases, dtype=float)))

    def phases(self):
        return np.angle(self.phase_vectors)


@dataclass(frozen=True)
class Observation:
    stacked: np.ndarray
    noise_power: float
    operator: np.ndarray
    sensor_count: int = field(default=1)

    @property
    def per_slot(self):
        return self.stacked.reshape(-1, self.sensor_count)


def build_sensor_array(scenario: Scenario) -> SensorArray:
    steering = np.stack([upa_steering(s, scenario.geometry) for s in scenario.sensors])
    weights = np.full(scenario.sensor_count, scenario.rho, dtype=complex)
    return SensorArray(steering, weights)


def measurement_operator(sensor_array: SensorArray, schedule: BeamformingSchedule):
    """Stack Xi A_R diag(w_t) for t = 1..T into a TR x MN matrix."""
    weighted = sensor_array.weighted
    return (weighted[None, :, :] * schedule.phase_vectors[:, None, :]).reshape(
        -1, weighted.shape[1]
    )


def true_channel_column(target: AnglePair, geometry: ArrayGeometry) -> np.ndarray:
    """Exact steering vector at the true (off-grid) angle, not the Taylor model."""
    return upa_steering(target, geometry)


def linearized_channel_column(target: AnglePair, dictionary: Dictionary,
                              geometry: ArrayGeometry) -> np.ndarray:
    """First-order Taylor column (a + b delta_az) (x) (a + b delta_el) about the nearest grid cell."""
    p, d_theta = nearest_grid_decompose(target.azimuth, dictionary.azimuth_grid)
    q, d_phi = nearest_grid_decompose(target.elevation, dictionary.elevation_grid)
    az = dictionary.azimuth_atoms[:, p] + dictionary.azimuth_derivs[:, p] * d_theta * DEG
    el = dictionary.elevation_atoms[:, q] + dictionary.elevation_derivs[:, q] * d_phi * DEG
    return np.kron(az, el)


def source_vector(scenario: Scenario, mode: str = "exact",
                  dictionary: Dictionary | None = None) -> np.ndarray:
    """Combined RIS-domain signal sum_k x_k c_k (the A_u x of the model)."""
    if mode == "exact":
        cols = [true_channel_column(t, scenario.geometry) for t in scenario.targets]
    elif mode == "linearized":
        if dictionary is None:
            raise ValueError("linearized synthesis needs a dictionary")
        cols = [linearized_channel_column(t, dictionary, scenario.geometry)
                for t in scenario.targets]
    else:
        raise ValueError(f"unknown synthesis mode {mode!r}")
    return np.stack(cols, axis=1) @ scenario.amplitudes


def calibrate_noise_power(scenario: Scenario, schedule: BeamformingSchedule | None = None,
                          source: np.ndarray | None = None) -> float:
    """Noise power realizing ``scenario.snr_db``.

    With a schedule this is mean_t ||H_t x||^2 / gamma. Without one the
    received power is its expectation under independent uniform RIS phases,
    ||Xi||_F^2 ||A_u x||^2, which does not depend on any particular schedule.
    """
    if scenario.noise_power is not None:
        return scenario.noise_power
    if source is None:
        source = source_vector(scenario)
    sensor_array = build_sensor_array(scenario)
    if schedule is None:
        power = np.sum(np.abs(sensor_array.weights) ** 2) * np.vdot(source, source).real
    else:
        hx = (measurement_operator(sensor_array, schedule) @ source).reshape(schedule.slots, -1)
        power = np.mean(np.sum(np.abs(hx) ** 2, axis=1))
    if power == 0:
        raise CalibrationError("zero signal power; cannot set noise from an SNR")
    return float(power / 10 ** (scenario.snr_db / 10))


def complex_noise(shape, noise_power, rng):
    """Circular complex Gaussian with variance noise_power/2 per real dimension."""
    scale = np.sqrt(noise_power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_observation(scenario: Scenario, schedule: BeamformingSchedule,
                           mode: str = "exact", rng=None, *,
                           dictionary: Dictionary | None = None,
                           noise_power: float | None = None) -> Observation:
    if schedule.size != scenario.geometry.size:
        raise ValueError("schedule length does not match the array size")
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    source = source_vector(scenario, mode, dictionary)
    if noise_power is None:
        noise_power = calibrate_noise_power(scenario, schedule, source)
    z = measurement_operator(build_sensor_array(scenario), schedule)
    y = z @ source
    if noise_power > 0:
        y = y + complex_noise(y.shape, noise_power, rng)
    return Observation(y, float(noise_power), z, scenario.sensor_count)


def received_snr(hx: np.ndarray, noise_power: float) -> float:
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    return float(np.vdot(hx, hx).real / noise_power)


def per_sensor_snr(hx: np.ndarray, noise_power: float) -> np.ndarray:
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    return np.abs(hx) ** 2 / noise_power


def default_grid() -> AngleGrid:
    return AngleGrid(-90.0, 90.0, 3.0)

