"""Alternating estimation / beamforming loop and Monte Carlo experiments."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .beamformer import (
    bcgd_schedule,
    build_sensor_objective,
    crlb_min_schedule,
    random_phases,
    random_schedule,
)
from .crlb import SingularFisherError, build_crlb_surrogate, crlb_rms_deg, fisher_information
from .estimator import DoaEstimate, EstimationError, estimate
from .geometry import (
    DEG,
    AngleGrid,
    AnglePair,
    azimuth_steering,
    build_dictionary,
    elevation_steering,
    upa_steering,
)
from .scene import (
    BeamformingSchedule,
    Scenario,
    build_sensor_array,
    calibrate_noise_power,
    measurement_operator,
    source_vector,
    synthesize_observation,
)

log = logging.getLogger(__name__)

METHODS = ("random", "bcgd", "crlb_surrogate")

CSV_COLUMNS = ("method", "snr_db", "iteration", "rmse_theta_deg", "rmse_phi_deg",
               "rmse_deg", "crlb_deg", "trials", "converged_frac")


@dataclass(frozen=True)
class EstimatorSettings:
    k_known: bool = True
    k_max: int | None = None
    residual_tol: float = 1e-12
    rcond: float = 1e-10


@dataclass(frozen=True)
class BeamformerSettings:
    method: str = "bcgd"
    inner_iters: int = 10
    perturbation: float = 0.0
    crlb_iters: int = 100
    loop_random: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown beamforming method {self.method!r}")


@dataclass(frozen=True)
class LoopSettings:
    max_outer: int = 10
    doa_tol_deg: float = 0.05

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.doa_tol_deg <= 0:
            raise ValueError("doa_tol_deg must be positive")


@dataclass(frozen=True)
class SweepSettings:
    snr_db: tuple = (0.0, 5.0, 10.0)
    methods: tuple = METHODS


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    azimuth_grid: AngleGrid = AngleGrid()
    elevation_grid: AngleGrid = AngleGrid()
    estimator: EstimatorSettings = EstimatorSettings()
    beamformer: BeamformerSettings = BeamformerSettings()
    loop: LoopSettings = LoopSettings()
    sweep: SweepSettings | None = None
    monte_carlo: int = 100
    min_snr_db: float | None = None
    output: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.monte_carlo < 1:
            raise ValueError("monte_carlo must be >= 1")

    @property
    def k(self):
        if self.estimator.k_known:
            return self.scenario.target_count
        if self.estimator.k_max is None:
            raise ValueError("unknown target count needs estimator.k_max")
        return self.estimator.k_max


@dataclass
class RunResult:
    estimates: list = field(default_factory=list)
    rmse_theta: list = field(default_factory=list)
    rmse_phi: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    schedules: list = field(default_factory=list)
    sensor_snr: list = field(default_factory=list)
    crlb_deg: float = float("nan")
    converged: bool = False
    iterations_used: int = 0
    snr_violation: bool = False

    @property
    def final_schedule(self):
        return self.schedules[-1]

    @property
    def final_estimate(self):
        return self.estimates[-1]


@lru_cache(maxsize=16)
def _dictionary(geometry, az_grid, el_grid):
    return build_dictionary(az_grid, el_grid, geometry)


def dictionary_for(config: ExperimentConfig):
    return _dictionary(config.scenario.geometry, config.azimuth_grid, config.elevation_grid)


def estimated_source(est: DoaEstimate, dictionary) -> np.ndarray:
    """A_u x rebuilt from estimated grid cells, offsets and amplitudes (first-order model)."""
    geometry_size = dictionary.azimuth_atoms.shape[0] * dictionary.elevation_atoms.shape[0]
    column = np.zeros(geometry_size, dtype=complex)
    for t in est.targets:
        p = dictionary.azimuth_grid.index_of(t.azimuth_grid)
        q = dictionary.elevation_grid.index_of(t.elevation_grid)
        az = dictionary.azimuth_atoms[:, p] + dictionary.azimuth_derivs[:, p] * t.azimuth_offset * DEG
        el = dictionary.elevation_atoms[:, q] + dictionary.elevation_derivs[:, q] * t.elevation_offset * DEG
        column += t.amplitude * np.kron(az, el)
    return column


def match_to_truth(estimated: np.ndarray, truth: np.ndarray):
    """Optimal assignment of estimated to true angle pairs by total angular distance.

    Returns (truth_indices, estimate_indices); unmatched truths are those
    missing from the first array.
    """
    if len(estimated) == 0 or len(truth) == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    diff = truth[:, None, :] - estimated[None, :, :]
    cost = np.hypot(diff[..., 0], diff[..., 1])
    return linear_sum_assignment(cost)


def squared_errors(est: DoaEstimate, truth, penalty=(90.0, 90.0)):
    """Per-target squared (azimuth, elevation) errors after matching, K x 2."""
    truth = np.asarray([t.as_tuple() if isinstance(t, AnglePair) else t for t in truth], dtype=float)
    out = np.tile(np.asarray(penalty, dtype=float) ** 2, (len(truth), 1))
    rows, cols = match_to_truth(est.angles(), truth)
    if len(rows):
        out[rows] = (est.angles()[cols] - truth[rows]) ** 2
    return out


def rmse(estimates, truth, penalty=(90.0, 90.0)):
    """(rmse_theta, rmse_phi, rmse) in degrees over trials and targets.

    Targets an estimate misses contribute ``penalty`` per axis (the grid half-range by default).
    """
    if len(estimates) == 0:
        raise ValueError("no trials")
    err = np.concatenate([squared_errors(e, truth, penalty) for e in estimates])
    r_theta, r_phi = np.sqrt(err.mean(axis=0))
    return float(r_theta), float(r_phi), float((r_theta + r_phi) / 2)


def max_angle_change(previous: DoaEstimate, current: DoaEstimate) -> float:
    if len(previous) != len(current) or len(current) == 0:
        return float("inf")
    a, b = previous.angles(), current.angles()
    rows, cols = match_to_truth(b, a)
    return float(np.max(np.abs(a[rows] - b[cols])))


def _grid_penalty(config):
    return ((config.azimuth_grid.high - config.azimuth_grid.low) / 2,
            (config.elevation_grid.high - config.elevation_grid.low) / 2)


def next_schedule(method, est, config, sensor_array, noise_power, rng):
    scenario = config.scenario
    slots, size = scenario.snapshots, scenario.geometry.size
    settings = config.beamformer
    if method == "random" or len(est) == 0:
        return random_schedule(slots, size, rng)
    if method == "bcgd":
        column = estimated_source(est, dictionary_for(config))
        objectives = [build_sensor_objective(j, sensor_array, column)
                      for j in range(scenario.sensor_count)]
        return bcgd_schedule(objectives, slots, random_phases(size, rng), settings.inner_iters,
                             perturbation=settings.perturbation, rng=rng)
    if method == "crlb_surrogate":
        surrogate = build_crlb_surrogate(est.angles(), est.amplitudes(), sensor_array,
                                         scenario.geometry, slots,
                                         sigma2=noise_power if noise_power > 0 else 1.0)
        schedule, _ = crlb_min_schedule(surrogate, slots, settings.crlb_iters, rng=rng)
        return schedule
    raise ValueError(f"unknown method {method!r}")


def reference_crlb_deg(scenario, schedule, noise_power):
    if noise_power <= 0:
        return 0.0
    z = measurement_operator(build_sensor_array(scenario), schedule)
    try:
        fim = fisher_information(z, scenario.targets, scenario.amplitudes, noise_power,
                                 scenario.geometry)
        return crlb_rms_deg(fim)
    except SingularFisherError:
        return float("nan")


def alternating_optimize(config: ExperimentConfig, rng, method: str | None = None) -> RunResult:
    """Alternate DoA estimation and schedule design until the DoAs settle.

    Iteration 0 uses a random schedule. The noise power is fixed up front
    from the scenario SNR and the expected received power under random
    phases, so schedules that focus energy raise the effective SNR.
    """
    method = method or config.beamformer.method
    scenario = config.scenario
    dictionary = dictionary_for(config)
    sensor_array = build_sensor_array(scenario)
    source = source_vector(scenario)
    noise_power = calibrate_noise_power(scenario, source=source)
    max_outer = config.loop.max_outer
    if method == "random" and not config.beamformer.loop_random:
        max_outer = 1
    penalty = _grid_penalty(config)
    result = RunResult()
    schedule = random_schedule(scenario.snapshots, scenario.geometry.size, rng)
    for it in range(max_outer):
        obs = synthesize_observation(scenario, schedule, rng=rng, noise_power=noise_power)
        try:
            est = estimate(obs, dictionary, config.k, config.estimator.residual_tol,
                           config.estimator.rcond)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise EstimationError(f"estimation failed at iteration {it}: {exc}") from exc
        r_theta, r_phi, r = rmse([est], scenario.targets, penalty)
        hx = (obs.operator @ source).reshape(scenario.snapshots, -1)
        power = np.mean(np.abs(hx) ** 2, axis=0)
        result.sensor_snr.append(power / noise_power if noise_power > 0 else power)
        result.estimates.append(est)
        result.schedules.append(schedule)
        result.rmse_theta.append(r_theta)
        result.rmse_phi.append(r_phi)
        result.rmse.append(r)
        result.iterations_used = it + 1
        if it > 0 and max_angle_change(result.estimates[-2], est) < config.loop.doa_tol_deg:
            result.converged = True
            break
        if it + 1 < max_outer:
            schedule = next_schedule(method, est, config, sensor_array, noise_power, rng)
    result.crlb_deg = reference_crlb_deg(scenario, result.final_schedule, noise_power)
    if config.min_snr_db is not None and noise_power > 0:
        total = np.sum(result.sensor_snr[-1])
        result.snr_violation = bool(10 * np.log10(total) < config.min_snr_db)
    return result


def trial_rng(seed: int, trial: int):
    """Per-trial stream; shared across methods and SNR points (common random numbers)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def _run_trial(args):
    config, method, trial = args
    return alternating_optimize(config, trial_rng(config.seed, trial), method)


def _map(fn, jobs_list, jobs):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, jobs_list, chunksize=max(1, len(jobs_list) // (4 * jobs))))
    return [fn(j) for j in jobs_list]


def _row(method, snr_db, iteration, estimates, truth, penalty, crlb_values, converged):
    r_theta, r_phi, r = rmse(estimates, truth, penalty)
    crlb_values = np.asarray(crlb_values, dtype=float)
    crlb_deg = float(np.sqrt(np.mean(crlb_values ** 2))) if crlb_values.size else float("nan")
    return {
        "method": method,
        "snr_db": float(snr_db),
        "iteration": int(iteration),
        "rmse_theta_deg": r_theta,
        "rmse_phi_deg": r_phi,
        "rmse_deg": r,
        "crlb_deg": crlb_deg,
        "trials": len(estimates),
        "converged_frac": float(np.mean(converged)),
    }


def snr_sweep(config: ExperimentConfig, snr_list=None, methods=None, jobs: int = 1):
    """RMSE of the final estimate per (SNR, method) over ``config.monte_carlo`` trials.

    The ``iteration`` column holds the last iteration index any trial reached.
    """
    sweep = config.sweep or SweepSettings()
    snr_list = tuple(snr_list if snr_list is not None else sweep.snr_db)
    methods = tuple(methods if methods is not None else sweep.methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    penalty = _grid_penalty(config)
    rows = []
    for snr in snr_list:
        cfg = replace(config, scenario=config.scenario.with_snr(snr))
        for method in methods:
            results = _map(_run_trial, [(cfg, method, i) for i in range(cfg.monte_carlo)], jobs)
            rows.append(_row(method, snr, max(r.iterations_used for r in results) - 1,
                             [r.final_estimate for r in results], cfg.scenario.targets, penalty,
                             [r.crlb_deg for r in results], [r.converged for r in results]))
            log.info("snr=%s method=%s rmse=%.4f", snr, method, rows[-1]["rmse_deg"])
    return rows


def convergence_run(config: ExperimentConfig, method: str = "bcgd", jobs: int = 1):
    """Iteration-indexed RMSE averaged over trials; converged trials hold their last estimate."""
    if config.loop.max_outer < 3:
        raise ValueError("convergence run needs max_outer >= 3")
    penalty = _grid_penalty(config)
    results = _map(_run_trial, [(config, method, i) for i in range(config.monte_carlo)], jobs)
    rows = []
    for it in range(config.loop.max_outer):
        picks = [r.estimates[min(it, r.iterations_used - 1)] for r in results]
        done = [r.converged and r.iterations_used - 1 <= it for r in results]
        rows.append(_row(method, config.scenario.snr_db if config.scenario.snr_db is not None
                         else float("inf"), it, picks, config.scenario.targets, penalty,
                         [r.crlb_deg for r in results], done))
    return rows


def field_map(schedule: BeamformingSchedule, scenario: Scenario, resolution: float = 1.0):
    """Slot-averaged power |a(az, el)^T diag(w_t) A_u x|^2 over an angle grid.

    The row form a^T matches how sensors receive, so the map evaluated at a
    sensor's angles equals that sensor's received power divided by |Xi_jj|^2.
    Returns (azimuths, elevations, power) with power[i, j] at (az[i], el[j]);
    directions with cos^2(el) < sin^2(az) are NaN.
    """
    span = 180.0 / resolution
    if abs(span - round(span)) > 1e-9:
        raise ValueError("resolution must divide 180 degrees")
    axis = AngleGrid(-90.0, 90.0, resolution).points
    geometry = scenario.geometry
    a_az = azimuth_steering(axis, geometry)
    a_el = elevation_steering(axis, geometry)
    weighted = schedule.phase_vectors * source_vector(scenario)[None, :]
    power = np.zeros((len(axis), len(axis)))
    for row in weighted:
        # a^T v = a_az^T V^T a_el with V = unvec(v) of shape N x M
        v = row.reshape(geometry.m_count, geometry.n_count)
        power += np.abs(a_az.T @ v @ a_el) ** 2
    power /= schedule.slots
    az, el = np.meshgrid(axis * DEG, axis * DEG, indexing="ij")
    radicand = np.cos(el) ** 2 - np.sin(az) ** 2
    power[radicand < -1e-12] = np.nan
    return axis, axis, power


def sensor_power_ratio(schedule: BeamformingSchedule, scenario: Scenario, probes: np.ndarray) -> float:
    """Fraction of (sensor, probe) pairs where the sensor direction receives at least the probe's power."""
    source = source_vector(scenario)
    weighted = schedule.phase_vectors * source[None, :]

    def power(pair):
        return np.mean(np.abs(weighted @ upa_steering(pair, scenario.geometry)) ** 2)

    sensor = [power(s) for s in scenario.sensors]
    probe = [power(AnglePair(*p)) for p in probes]
    wins = [s >= p for s, p in itertools.product(sensor, probe)]
    return float(np.mean(wins))
