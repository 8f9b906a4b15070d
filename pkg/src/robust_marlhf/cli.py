"""Command-line entry point: ``robust-marlhf <command> [--config FILE] [--seed N] [--out PATH]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConstructionError, EstimationError, ModelError, ParameterError
from .game import coverage_report, save_game
from .harness import (
    CORRUPTION_STREAM,
    DATA_STREAM,
    ExperimentConfig,
    build_game,
    build_policy,
    derive_seed,
    reward_param_errors,
    run_experiment,
    true_gap,
)
from .learners import LearnerConfig, run_learner
from .preferences import corrupt_dataset, generate_clean_dataset, load_dataset, read_dataset_header, save_dataset

VALIDATION_ERRORS = (ParameterError, ConstructionError, ModelError, ValueError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "game", None):
        data["game"] = args.game
    if args.seed is not None:
        data["seeds"] = [args.seed]
    return ExperimentConfig.from_dict(data)


def _seed(args, config: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else int(config.seeds[0])


def _emit_json(obj, out) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _require_out(args):
    if not args.out:
        raise ParameterError(f"{args.command} needs --out")
    return args.out


def cmd_gen_game(args) -> None:
    config = _load_config(args)
    save_game(build_game(config.game), _require_out(args))


def cmd_gen_data(args) -> None:
    config = _load_config(args)
    game = build_game(config.game)
    mu, mu_ref = build_policy(config.mu, game), build_policy(config.mu_ref, game)
    data = generate_clean_dataset(game, mu, mu_ref, config.m, derive_seed(_seed(args, config), DATA_STREAM))
    save_dataset(data, _require_out(args), game)


def cmd_corrupt(args) -> None:
    config = _load_config(args)
    game = build_game(config.game)
    data = load_dataset(args.data, game, with_truth=True)
    epsilon = args.epsilon if args.epsilon is not None else float(config.epsilons[0])
    attacker = args.attacker or config.attacker
    behavior = build_policy(config.mu, game)
    out = corrupt_dataset(
        data, epsilon, attacker, derive_seed(_seed(args, config), CORRUPTION_STREAM), game,
        target_agents=config.target_agents, behavior=behavior,
    )
    save_dataset(out, _require_out(args), game)


def cmd_train(args) -> None:
    config = _load_config(args)
    game = build_game(config.game)
    data = load_dataset(args.data, game)  # never opens the sidecar
    block = dict(config.learner_config)
    if args.epsilon is not None:
        block["epsilon"] = args.epsilon
    elif "epsilon" not in block:
        block["epsilon"] = float(read_dataset_header(args.data).get("epsilon", 0.0))
    block["seed"] = _seed(args, config)
    learner = args.learner or config.learner
    output = run_learner(learner, data, game.skeleton(), LearnerConfig.from_dict(block))
    result = output.to_dict()
    result["learner"] = learner
    result["learner_config"] = LearnerConfig.from_dict(block).to_dict()
    _emit_json(result, args.out)


def cmd_evaluate(args) -> None:
    from .game import policy_from_dict

    config = _load_config(args)
    game = build_game(config.game)
    saved = json.loads(Path(args.policy).read_text(encoding="utf-8"))
    policy = policy_from_dict(saved.get("policy", saved))
    report = {"true_gap": true_gap(game, policy)}
    if "reward_model" in saved:
        errors = reward_param_errors(game, np.asarray(saved["reward_model"]["theta_hat"]))
        report["reward_param_error"] = float(np.sqrt((errors**2).sum()))
        report["reward_param_error_per_agent"] = errors.tolist()
    if "estimated_gap" in saved:
        report["estimated_gap"] = saved["estimated_gap"]
    _emit_json(report, args.out)


def cmd_sweep(args) -> None:
    config = _load_config(args)
    out = args.out or config.output
    if out is None:
        raise ParameterError("sweep needs --out or an output path in the config")
    rows = run_experiment(config, out)
    failed = sum(r.status != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {out} ({failed} failed)")


def cmd_verify_coverage(args) -> None:
    config = _load_config(args)
    game = build_game(config.game)
    mu, mu_ref = build_policy(config.mu, game), build_policy(config.mu_ref, game)
    pi_star = None if config.pi_star is None else build_policy(config.pi_star, game)
    report = coverage_report(game, mu, mu_ref, pi_star).to_dict()
    if pi_star is None:
        report = {k: v for k, v in report.items() if k not in ("C_R", "C_P")}
    _emit_json(report, args.out)


COMMANDS = {
    "gen-game": (cmd_gen_game, "write a game JSON file"),
    "gen-data": (cmd_gen_data, "sample a clean preference dataset"),
    "corrupt": (cmd_corrupt, "apply an attacker to a dataset"),
    "train": (cmd_train, "run a learner on a dataset and write its output JSON"),
    "evaluate": (cmd_evaluate, "exact gap of a saved policy"),
    "sweep": (cmd_sweep, "run the (seed, epsilon) grid of a config and write a CSV"),
    "verify-coverage": (cmd_verify_coverage, "print coverage constants for mu, mu_ref and pi_star"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-marlhf", description="Corruption-robust equilibrium learning from preferences.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="overrides the config's seed list")
        p.add_argument("--out", help="output path")
        p.add_argument("--game", help="reference game name or game file; overrides the config")
        if name in ("corrupt", "train"):
            p.add_argument("--data", required=True, help="dataset file")
            p.add_argument("--epsilon", type=float)
        if name == "corrupt":
            p.add_argument("--attacker")
        if name == "train":
            p.add_argument("--learner")
        if name == "evaluate":
            p.add_argument("--policy", required=True, help="learner output or policy JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"robust-marlhf: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except VALIDATION_ERRORS as exc:
        print(f"robust-marlhf: invalid input: {exc}", file=sys.stderr)
        return 2
    except (OSError, EstimationError, RuntimeError) as exc:
        print(f"robust-marlhf: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
