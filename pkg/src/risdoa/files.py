"""Config loading and on-disk formats for schedules, observations, estimates and tables."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import platform
import subprocess
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from .estimator import DoaEstimate
from .geometry import AngleGrid, ArrayGeometry
from .pipeline import (
    CSV_COLUMNS,
    METHODS,
    BeamformerSettings,
    EstimatorSettings,
    ExperimentConfig,
    LoopSettings,
    SweepSettings,
)
from .scene import BeamformingSchedule, Observation, PathLoss, Scenario

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_GRID = {
    "type": "object",
    "properties": {"low": {"type": "number"}, "high": {"type": "number"},
                   "step": {"type": "number", "exclusiveMinimum": 0}},
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "geometry", "sensors", "targets"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "geometry": {
            "type": "object",
            "required": ["m", "n"],
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 1},
                "spacing": {"type": "number", "exclusiveMinimum": 0},
                "wavelength": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "azimuth_grid": _GRID,
        "elevation_grid": _GRID,
        "sensors": {"type": "array", "items": _PAIR, "minItems": 1},
        "targets": {"type": "array", "items": _PAIR, "minItems": 1},
        "prs_amplitudes": {"type": ["array", "null"], "items": _PAIR},
        "path_loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"exponent": {"type": "number"},
                           "reference": {"type": "number", "exclusiveMinimum": 0},
                           "distance": {"type": "number", "exclusiveMinimum": 0}},
        },
        "snapshots": {"type": ["integer", "null"], "minimum": 1},
        "snr_db": {"type": ["number", "null"]},
        "noise_power": {"type": ["number", "null"], "minimum": 0},
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"k_known": {"type": "boolean"},
                           "k_max": {"type": ["integer", "null"], "minimum": 1},
                           "residual_tol": {"type": "number", "minimum": 0},
                           "rcond": {"type": "number", "minimum": 0}},
        },
        "beamformer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"method": {"enum": list(METHODS)},
                           "inner_iters": {"type": "integer", "minimum": 1},
                           "perturbation": {"type": "number", "minimum": 0},
                           "crlb_iters": {"type": "integer", "minimum": 1},
                           "loop_random": {"type": "boolean"}},
        },
        "loop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"max_outer": {"type": "integer", "minimum": 1},
                           "doa_tol_deg": {"type": "number", "exclusiveMinimum": 0}},
        },
        "sweep": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {"snr_db": {"type": "array", "items": {"type": "number"}},
                           "methods": {"type": "array", "items": {"enum": list(METHODS)}}},
        },
        "monte_carlo": {"type": "integer", "minimum": 1},
        "min_snr_db": {"type": ["number", "null"]},
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    try:
        g = data["geometry"]
        wavelength = g.get("wavelength", 0.1)
        geometry = ArrayGeometry(g["m"], g["n"], g.get("spacing", wavelength / 2), wavelength)
        amps = data.get("prs_amplitudes")
        snr, noise = data.get("snr_db", 10.0), data.get("noise_power")
        if noise is not None and "snr_db" not in data:
            snr = None
        scenario = Scenario(
            geometry,
            [tuple(s) for s in data["sensors"]],
            [tuple(t) for t in data["targets"]],
            PathLoss(**data.get("path_loss", {})),
            None if amps is None else tuple(complex(re, im) for re, im in amps),
            data.get("snapshots"),
            snr,
            noise,
            data.get("seed", 0),
        )
        sweep = data.get("sweep")
        return ExperimentConfig(
            scenario,
            AngleGrid(**data.get("azimuth_grid", {})),
            AngleGrid(**data.get("elevation_grid", {})),
            EstimatorSettings(**data.get("estimator", {})),
            BeamformerSettings(**data.get("beamformer", {})),
            LoopSettings(**data.get("loop", {})),
            None if sweep is None else SweepSettings(tuple(sweep.get("snr_db", (0.0, 5.0, 10.0))),
                                                     tuple(sweep.get("methods", METHODS))),
            data.get("monte_carlo", 100),
            data.get("min_snr_db"),
            data.get("output", "out"),
            data.get("seed", 0),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    sc = config.scenario
    g = sc.geometry
    out = {
        "schema_version": SCHEMA_VERSION,
        "geometry": {"m": g.m_count, "n": g.n_count, "spacing": g.spacing, "wavelength": g.wavelength},
        "azimuth_grid": {"low": config.azimuth_grid.low, "high": config.azimuth_grid.high,
                         "step": config.azimuth_grid.step},
        "elevation_grid": {"low": config.elevation_grid.low, "high": config.elevation_grid.high,
                           "step": config.elevation_grid.step},
        "sensors": [list(s.as_tuple()) for s in sc.sensors],
        "targets": [list(t.as_tuple()) for t in sc.targets],
        "prs_amplitudes": [[a.real, a.imag] for a in sc.prs_amplitudes],
        "path_loss": asdict(sc.path_loss),
        "snapshots": sc.snapshots,
        "snr_db": sc.snr_db,
        "noise_power": sc.noise_power,
        "estimator": asdict(config.estimator),
        "beamformer": asdict(config.beamformer),
        "loop": asdict(config.loop),
        "sweep": None if config.sweep is None else {"snr_db": list(config.sweep.snr_db),
                                                    "methods": list(config.sweep.methods)},
        "monte_carlo": config.monte_carlo,
        "min_snr_db": config.min_snr_db,
        "output": config.output,
        "seed": config.seed,
    }
    return out


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path):
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


def save_schedule(schedule: BeamformingSchedule, path, geometry: ArrayGeometry | None = None):
    """T lines of MN phases (radians, flat element order) plus a ``.json`` sidecar."""
    path = Path(path)
    np.savetxt(path, schedule.phases(), fmt="%.17g")
    meta = {"slots": schedule.slots, "elements": schedule.size, "unit": "radian",
            "ordering": "elevation-fastest"}
    if geometry is not None:
        meta.update(m=geometry.m_count, n=geometry.n_count)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_schedule(path) -> BeamformingSchedule:
    phases = np.atleast_2d(np.loadtxt(Path(path), dtype=float))
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if phases.shape != (meta["slots"], meta["elements"]):
            raise ConfigError(f"schedule shape {phases.shape} disagrees with its sidecar")
    return BeamformingSchedule.from_phases(phases)


def save_observation(observation: Observation, path):
    np.savez(Path(path), stacked=observation.stacked, operator=observation.operator,
             noise_power=observation.noise_power, sensor_count=observation.sensor_count)


def load_observation(path) -> Observation:
    with np.load(Path(path)) as data:
        return Observation(data["stacked"], float(data["noise_power"]), data["operator"],
                           int(data["sensor_count"]))


def save_estimate(est: DoaEstimate, path):
    body = {"targets": est.to_records(), "cross_term_mismatch": est.cross_term_mismatch}
    Path(path).write_text(json.dumps(body, indent=2) + "\n")


def load_estimate(path) -> DoaEstimate:
    body = json.loads(Path(path).read_text())
    est = DoaEstimate.from_records(body["targets"])
    return DoaEstimate(est.targets, float(body.get("cross_term_mismatch", 0.0)))


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in CSV_COLUMNS[1:]:
            row[key] = float(row[key])
    return rows


def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_manifest(config: ExperimentConfig, path, command: str, outputs=(), extra=None):
    """Run metadata kept apart from the CSV so the tables stay byte-reproducible."""
    from . import __version__

    body = {
        "command": command,
        "config": config_to_dict(config),
        "outputs": [str(o) for o in outputs],
        "package_version": __version__,
        "git_revision": _git_revision(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2) + "\n")
