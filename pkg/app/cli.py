# app/cli.py
"""Command-line entry point: python -m app.cli <command> [options]"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from app.services.config import load_run_config
from app.services.env import synth_dataset, write_dataset
from app.services.errors import ConfigurationError, IngestionError, ReadinessError, Sa2coError
from app.services.grid import violation_report
from app.services.assets import load_state, net_injections
from app.services.harness import (
    BASELINE_KINDS,
    build_scenario,
    evaluate,
    run_baseline,
    run_method,
    scenario_assets,
    train_sa2co,
    write_evaluation,
)

load_dotenv()

logger = logging.getLogger("app.cli")

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_READINESS = 4
EXIT_FAULT = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sa2co", description="Safe SAC dispatch of distribution-network batteries")
    parser.add_argument("--config", help="KEY=value run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--backend", choices=["conic", "search"], help="Safe-dispatch backend")
    parser.add_argument("--log-level", default="INFO")

    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train the agent with the chosen screening")
    train.add_argument("--episodes", type=int)
    train.add_argument("--screening", choices=["guard", "acpf", "none"])
    train.add_argument("--resume", help="Directory holding a resumable checkpoint")

    commands.add_parser("execute", help="Run the trained policy with guard screening on the test days")

    baseline = commands.add_parser("baseline", help="Evaluate one baseline on the test days")
    baseline.add_argument("kind", choices=BASELINE_KINDS)

    commands.add_parser("evaluate", help="Compare all available methods and write comparison.csv")

    powerflow = commands.add_parser("powerflow", help="Solve the power flow for a state file or one hour of the dataset")
    powerflow.add_argument("state", nargs="?", help="State CSV (bus,p_kw,q_kvar); without it the dataset hour is used")
    powerflow.add_argument("--hour", type=int, default=0)
    powerflow.add_argument("--ess-kw", help="Comma-separated ESS powers in kW (positive = charging)")

    synth = commands.add_parser("synth", help="Write the synthetic dataset to CSV")
    synth.add_argument("path")
    return parser


def _overrides(args) -> dict:
    overrides = {
        "SEED": args.seed,
        "OUT_DIR": args.out,
        "DISPATCH_BACKEND": args.backend,
        "EPISODES": getattr(args, "episodes", None),
        "SCREENING": getattr(args, "screening", None),
    }
    return {key: value for key, value in overrides.items() if value is not None}


def run(args) -> int:
    config = load_run_config(args.config, _overrides(args))

    if args.command == "train":
        result = train_sa2co(config, resume_from=Path(args.resume) if args.resume else None)
        print(f"Trained {len(result.curve)} episodes in {result.training_minutes:.2f} min; outputs in {result.output_dir}")
        if result.guard_ready_episode is not None:
            print(f"Guard ready at episode {result.guard_ready_episode}")
        return EXIT_OK

    if args.command == "execute":
        scenario = build_scenario(config)
        uncontrolled, _ = run_method("uncontrolled", config, scenario)
        report, trajectories = run_method("sa2co", config, scenario, uncontrolled.average_daily_cost)
        write_evaluation(config.output_path / "evaluation", report, trajectories)
        print(report.model_dump_json(indent=2, exclude={"voltage_summary"}))
        return EXIT_OK

    if args.command == "baseline":
        report = run_baseline(args.kind, config)
        print(report.model_dump_json(indent=2, exclude={"voltage_summary"}))
        return EXIT_OK

    if args.command == "evaluate":
        comparison = evaluate(config)
        print(comparison.to_string(index=False))
        return EXIT_OK

    if args.command == "powerflow":
        scenario = build_scenario(config)
        n_ess = len(scenario.devices.ess)
        power = np.zeros(n_ess)
        if args.ess_kw:
            power = np.array([float(v) for v in args.ess_kw.split(",")])
            if power.shape != (n_ess,):
                raise ConfigurationError(f"--ess-kw needs {n_ess} values, got {power.size}")
        if args.state:
            inj = load_state(Path(args.state), scenario.network)
            for unit, value in zip(scenario.devices.ess, power):
                inj.p[unit.bus] += value / scenario.network.s_base
        else:
            inj = net_injections(scenario.network, scenario.profiles, scenario.devices.ess, power, args.hour)
        solution = scenario.solver.solve(inj)
        magnitudes = solution.magnitude
        print(f"converged={solution.converged} iterations={solution.iterations} "
              f"P_r={solution.slack_p * scenario.network.s_base:.3f} kW")
        for bus, value in enumerate(magnitudes, start=1):
            print(f"bus {bus:3d}  |V| = {value:.5f}")
        if solution.converged:
            for violation in violation_report(solution, scenario.network.voltage_limits):
                print(f"violation: {violation}")
        return EXIT_OK

    if args.command == "synth":
        # Always the generator, even when ENV_DATA_PATH names a dataset
        _, devices, base_loads = scenario_assets(config.env)
        profiles = synth_dataset(config.seed, config.env.synth_days, devices, base_loads, config.env.train_days)
        path = write_dataset(profiles, Path(args.path))
        print(f"Wrote {len(profiles)} hours to {path}")
        return EXIT_OK

    raise ConfigurationError(f"Unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except IngestionError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except ReadinessError as e:
        logger.error(f"Not ready: {e}")
        return EXIT_READINESS
    except Sa2coError as e:
        logger.error(f"Run aborted: {e}")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
