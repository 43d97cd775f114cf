"""Command-line entry point (``bolusrl``).

Exit codes: 0 success, 1 stage failure, 2 usage error, 3 invalid configuration.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, format_value, load_config, require
from .pipeline import (
    BaselineAdvisor,
    GreedyQ,
    StageError,
    evaluate_policy,
    generate_exploration_dataset,
    read_transitions_csv,
    run_experiment,
    write_report,
    write_transitions_csv,
)

logger = logging.getLogger("bolusrl")

DAYS_KEY = {
    "calibrate": "calibration.eval_days",
    "explore": "explore.days",
    "evaluate": "eval.days",
    "run-experiment": "explore.days",
}


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="experiment config (flat key = value); default: shipped adult #1")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--out", metavar="DIR", help="override output.dir")
    common.add_argument("--patient", type=int, help="override patient.id")
    common.add_argument("--days", type=int,
                        help="override the day count this command uses (calibrate: "
                             "calibration.eval_days, explore/run-experiment: explore.days, "
                             "evaluate: eval.days)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bolusrl",
        description="Learn pre-meal bolus policies on a surrogate T1D simulator and compare "
                    "them with the standard bolus advisor.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common()
    sub.add_parser("validate-config", parents=[common], help="check a config file and exit")
    sub.add_parser("calibrate", parents=[common],
                   help="grid-search the bolus advisor; writes calibration.csv")
    sub.add_parser("explore", parents=[common],
                   help="simulate random-dose exploration; writes trajectory.csv and "
                        "transitions.csv")
    sub.add_parser("train", parents=[common],
                   help="fit the Q model on train.dataset; writes model.txt")
    sub.add_parser("evaluate", parents=[common],
                   help="evaluate evaluate.policy (baseline or learned); writes "
                        "<label>/bins.csv and <label>/profile.csv")
    sub.add_parser("run-experiment", parents=[common],
                   help="calibrate, explore, train and evaluate both policies")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([(item, "expected KEY=VALUE for --set")])
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out is not None:
        out["output.dir"] = args.out
    if args.patient is not None:
        out["patient.id"] = str(args.patient)
    if args.days is not None and args.command in DAYS_KEY:
        out[DAYS_KEY[args.command]] = str(args.days)
    return out


def _require_file(config: ExperimentConfig, key: str) -> Path:
    require(config, key)
    path = config.path(key)
    if not path.is_file():
        raise ConfigError([(key, f"file not found: {path}")])
    return path


def cmd_validate(config: ExperimentConfig) -> None:
    for key in sorted(config.values):
        value = config.values[key]
        if value is not None:
            print(f"{key} = {format_value(value)}")
    print("config OK")


def cmd_calibrate(config: ExperimentConfig) -> None:
    from .advisor import calibrate_grid_search

    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    result = calibrate_grid_search(config.patient(), config.scenario(),
                                   config.calibration_grid(), config.stage_seed("calibrate"),
                                   config.reward(), config["reward.aggregate"])
    result.to_csv(out / "calibration.csv")
    best = result.best
    print(f"CIR={best.CIR!r} CF={best.CF!r} BG_target={best.BG_target!r} "
          f"mean_reward={result.mean_reward!r}")


def cmd_explore(config: ExperimentConfig) -> None:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    scenario = config.scenario()
    trajectory, transitions = generate_exploration_dataset(
        config.patient(), scenario, config["explore.days"], config.stage_seed("explore"),
        config.reward(), config["reward.aggregate"], config["sim.noise_cv"])
    trajectory.to_csv(out / "trajectory.csv")
    write_transitions_csv(transitions, scenario, out / "transitions.csv")
    print(f"{len(transitions)} transitions -> {out / 'transitions.csv'}")


def cmd_train(config: ExperimentConfig) -> None:
    from .qlearn import save_model, train

    dataset = _require_file(config, "train.dataset")
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    transitions = read_transitions_csv(dataset)
    result = train(transitions, config.train_config(), grid=config.feature_grid(),
                   meal_ids=config.scenario().meal_ids)
    save_model(result.model, out / "model.txt")
    if result.log:
        k, err = result.log[-1]
        print(f"trained {k} updates, final mean |TD error| {err:.4g} -> {out / 'model.txt'}")


def cmd_evaluate(config: ExperimentConfig) -> None:
    from .qlearn import load_model

    scenario = config.scenario()
    if config["evaluate.policy"] == "baseline":
        require(config, "advisor.cir", "advisor.cf", "advisor.target")
        policy = BaselineAdvisor(config.advisor_params(), scenario.cho_by_meal)
    else:
        model = load_model(_require_file(config, "evaluate.model"))
        policy = GreedyQ(model, config["train.action_grid_size"])
    report, _ = evaluate_policy(config.patient(), scenario, policy, config["eval.days"],
                                config.stage_seed("evaluate"), config.reward(),
                                config["reward.aggregate"], config["sim.noise_cv"])
    write_report(report, config.out_dir / report.label)
    fractions = " ".join(f"{f:.3f}" for f in report.bin_fractions)
    print(f"{report.label}: bins {fractions} hypo {report.hypo_fraction:.3f} "
          f"mean_reward {report.mean_reward:.4f}")


def cmd_run(config: ExperimentConfig) -> None:
    bundle = run_experiment(config)
    print((bundle.out_dir / "summary.txt").read_text(), end="")


COMMANDS = {
    "validate-config": cmd_validate,
    "calibrate": cmd_calibrate,
    "explore": cmd_explore,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run-experiment": cmd_run,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        config = load_config(args.config, _overrides(args))
        COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
