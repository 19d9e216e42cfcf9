"""Command-line entry point: ``risdoa <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .beamformer import bcgd_schedule, build_sensor_objective, crlb_min_schedule, random_phases, random_schedule
from .crlb import SingularFisherError, build_crlb_surrogate, crlb, crlb_rms_deg, fisher_information
from .estimator import EstimationError, estimate
from .files import (
    ConfigError,
    config_from_dict,
    load_config,
    load_observation,
    load_schedule,
    save_estimate,
    save_observation,
    save_schedule,
    write_manifest,
    write_table,
)
from .pipeline import (
    METHODS,
    alternating_optimize,
    convergence_run,
    dictionary_for,
    field_map,
    snr_sweep,
)
from .scene import (
    build_sensor_array,
    calibrate_noise_power,
    measurement_operator,
    source_vector,
    synthesize_observation,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("risdoa")


def default_config_path(name="desk"):
    return resources.files("risdoa") / "configs" / f"{name}.json"


def _snr_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from exc


def _resolve_config(args):
    if args.config:
        config = load_config(args.config)
    else:
        config = config_from_dict(json.loads(default_config_path().read_text()))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        config = replace(config, monte_carlo=args.trials)
    if args.snr and len(args.snr) == 1:
        config = replace(config, scenario=config.scenario.with_snr(args.snr[0]))
    if args.method:
        config = replace(config, beamformer=replace(config.beamformer, method=args.method))
    return config


def _out_dir(args, config):
    out = Path(args.out or config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rng(config):
    return np.random.default_rng(config.seed)


def _schedule_or_random(args, config, rng):
    sc = config.scenario
    if getattr(args, "schedule", None):
        schedule = load_schedule(args.schedule)
        if schedule.size != sc.geometry.size:
            raise ConfigError("schedule length does not match the configured array")
        return schedule
    return random_schedule(sc.snapshots, sc.geometry.size, rng)


def cmd_simulate(args, config):
    rng = _rng(config)
    schedule = _schedule_or_random(args, config, rng)
    out = _out_dir(args, config)
    obs = synthesize_observation(config.scenario, schedule, rng=rng,
                                 noise_power=calibrate_noise_power(config.scenario))
    save_observation(obs, out / "observation.npz")
    save_schedule(schedule, out / "schedule.txt", config.scenario.geometry)
    write_manifest(config, out / "manifest.json", "simulate",
                   [out / "observation.npz", out / "schedule.txt"])


def cmd_estimate(args, config):
    if not args.observation:
        raise ConfigError("estimate needs --observation")
    obs = load_observation(args.observation)
    try:
        est = estimate(obs, dictionary_for(config), config.k, config.estimator.residual_tol,
                       config.estimator.rcond)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise EstimationError(str(exc)) from exc
    out = _out_dir(args, config)
    save_estimate(est, out / "doa.json")
    write_manifest(config, out / "manifest.json", "estimate", [out / "doa.json"],
                   {"observation": str(args.observation)})


def cmd_beamform(args, config):
    """Design a schedule using the configured (true) target angles as guidance."""
    rng = _rng(config)
    sc = config.scenario
    method = config.beamformer.method
    sensor_array = build_sensor_array(sc)
    if method == "random":
        schedule = random_schedule(sc.snapshots, sc.geometry.size, rng)
    elif method == "bcgd":
        column = source_vector(sc)
        objectives = [build_sensor_objective(j, sensor_array, column) for j in range(sc.sensor_count)]
        schedule = bcgd_schedule(objectives, sc.snapshots, random_phases(sc.geometry.size, rng),
                                 config.beamformer.inner_iters,
                                 perturbation=config.beamformer.perturbation, rng=rng)
    else:
        surrogate = build_crlb_surrogate(sc.targets, sc.amplitudes, sensor_array, sc.geometry,
                                         sc.snapshots, calibrate_noise_power(sc))
        schedule, _ = crlb_min_schedule(surrogate, sc.snapshots, config.beamformer.crlb_iters, rng=rng)
    out = _out_dir(args, config)
    save_schedule(schedule, out / "schedule.txt", sc.geometry)
    write_manifest(config, out / "manifest.json", f"beamform --method {method}", [out / "schedule.txt"])


def cmd_crlb(args, config):
    rng = _rng(config)
    sc = config.scenario
    schedule = _schedule_or_random(args, config, rng)
    sigma2 = calibrate_noise_power(sc)
    z = measurement_operator(build_sensor_array(sc), schedule)
    fim = fisher_information(z, sc.targets, sc.amplitudes, sigma2, sc.geometry)
    body = {"crlb_rad2": crlb(fim), "crlb_rms_deg": crlb_rms_deg(fim),
            "condition_number": fim.condition_number, "noise_power": sigma2}
    out = _out_dir(args, config)
    (out / "crlb.json").write_text(json.dumps(body, indent=2) + "\n")
    write_manifest(config, out / "manifest.json", "crlb", [out / "crlb.json"])
    print(json.dumps(body))


def cmd_run(args, config):
    result = alternating_optimize(config, _rng(config))
    out = _out_dir(args, config)
    rows = [{"method": config.beamformer.method, "snr_db": config.scenario.snr_db, "iteration": i,
             "rmse_theta_deg": result.rmse_theta[i], "rmse_phi_deg": result.rmse_phi[i],
             "rmse_deg": result.rmse[i], "crlb_deg": result.crlb_deg, "trials": 1,
             "converged_frac": float(result.converged and i == result.iterations_used - 1)}
            for i in range(result.iterations_used)]
    write_table(rows, out / "run.csv")
    body = {"converged": result.converged, "iterations_used": result.iterations_used,
            "snr_violation": result.snr_violation, "crlb_deg": result.crlb_deg,
            "estimates": [e.to_records() for e in result.estimates],
            "sensor_snr": [s.tolist() for s in result.sensor_snr]}
    (out / "run.json").write_text(json.dumps(body, indent=2) + "\n")
    save_schedule(result.final_schedule, out / "schedule.txt", config.scenario.geometry)
    write_manifest(config, out / "manifest.json", "run",
                   [out / "run.csv", out / "run.json", out / "schedule.txt"])


def cmd_sweep(args, config):
    methods = (args.method,) if args.method else None
    rows = snr_sweep(config, args.snr, methods, jobs=args.jobs)
    out = _out_dir(args, config)
    write_table(rows, out / "sweep.csv")
    write_manifest(config, out / "manifest.json", "sweep", [out / "sweep.csv"],
                   {"snr_db": list(args.snr) if args.snr else None, "jobs": args.jobs})


def cmd_converge(args, config):
    rows = convergence_run(config, config.beamformer.method, jobs=args.jobs)
    out = _out_dir(args, config)
    write_table(rows, out / "converge.csv")
    write_manifest(config, out / "manifest.json", "converge", [out / "converge.csv"])


def cmd_fieldmap(args, config):
    rng = _rng(config)
    if args.schedule:
        schedule = load_schedule(args.schedule)
    else:
        schedule = alternating_optimize(config, rng).final_schedule
    az, el, power = field_map(schedule, config.scenario, args.resolution)
    out = _out_dir(args, config)
    with open(out / "fieldmap.csv", "w") as fh:
        fh.write("azimuth_deg\\elevation_deg," + ",".join(repr(float(v)) for v in el) + "\n")
        for a, row in zip(az, power):
            fh.write(repr(float(a)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(out / "sensors.csv", "w") as fh:
        fh.write("sensor,azimuth_deg,elevation_deg\n")
        for j, s in enumerate(config.scenario.sensors):
            fh.write(f"{j},{s.azimuth!r},{s.elevation!r}\n")
    write_manifest(config, out / "manifest.json", "fieldmap",
                   [out / "fieldmap.csv", out / "sensors.csv"], {"resolution_deg": args.resolution})


COMMANDS = {
    "simulate": (cmd_simulate, "synthesize one observation to a file"),
    "estimate": (cmd_estimate, "estimate DoAs from an observation file"),
    "beamform": (cmd_beamform, "design a schedule for the configured scenario"),
    "crlb": (cmd_crlb, "CRLB of the scenario under a schedule"),
    "run": (cmd_run, "one alternating estimation/beamforming run"),
    "sweep": (cmd_sweep, "Monte Carlo RMSE versus SNR per method"),
    "converge": (cmd_converge, "Monte Carlo RMSE versus outer iteration"),
    "fieldmap": (cmd_fieldmap, "slot-averaged RIS output power over angle"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: bundled desk config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config 'output')")
    common.add_argument("--snr", type=_snr_list, help="comma-separated SNR list in dB")
    common.add_argument("--method", choices=METHODS, help="beamforming method")
    common.add_argument("--trials", type=int, help="Monte Carlo trial count")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="risdoa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("simulate", "crlb", "fieldmap"):
            p.add_argument("--schedule", help="schedule text file (phases, one slot per line)")
        if name == "estimate":
            p.add_argument("--observation", help="observation .npz written by simulate")
        if name == "fieldmap":
            p.add_argument("--resolution", type=float, default=1.0, help="grid step in degrees")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve_config(args)
        COMMANDS[args.command][0](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, SingularFisherError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
