"""Command-line entry point: ``povexplore run | train | selfcheck``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import AGENTS, ExperimentConfig, load_config, resolve_output, run_experiment, train_experiment


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="povexplore", description="Information-gain exploration experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="evaluate an agent over several seeded runs")
    run.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    run.add_argument("--agent", choices=AGENTS)
    run.add_argument("--no-pov-mask", action="store_true", help="use the maskless (ablation) encoding")
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--checkpoint", help="weights for dqn-* agents")
    run.add_argument("--workers", type=int, help="parallel episode workers")
    run.add_argument("--eval-epsilon", type=float, help="random-action rate for dqn-* agents (default 0)")

    train = sub.add_parser("train", help="train a DQN agent")
    train.add_argument("--config", help="JSON experiment config")
    train.add_argument("--variant", choices=("single", "double"), required=True)
    train.add_argument("--no-pov-mask", action="store_true")
    train.add_argument("--seed", type=int)
    train.add_argument("--episodes", type=int)
    train.add_argument("--out")
    train.add_argument("--quiet", action="store_true")

    sub.add_parser("selfcheck", help="run the bundled oracle/gradient/property checks")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "agent", None):
        cfg.agent = args.agent
    if args.no_pov_mask:
        cfg.include_pov_mask = False
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if args.seed is not None:
        cfg.master_seed = args.seed
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "eval_epsilon", None) is not None:
        cfg.dqn = dataclasses.replace(cfg.dqn, eval_epsilon=args.eval_epsilon)
    if getattr(args, "episodes", None) is not None:
        cfg.dqn = dataclasses.replace(cfg.dqn, episodes=args.episodes)
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"povexplore: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)

    try:
        if args.command == "selfcheck":
            from .selfcheck import run_selfcheck

            return 0 if run_selfcheck() else 1

        cfg = _config(args)
        out = resolve_output(cfg, args.out)
        if args.command == "run":
            res = run_experiment(cfg, out)
            print(f"wrote {res.per_run_path} and {res.aggregate_path}")
            return 0

        def progress(row):
            if not args.quiet and (row.episode + 1) % 25 == 0:
                print(f"episode {row.episode + 1}: return {row.episode_return:.2f}, "
                      f"correct {row.final_correct_cells}, eps {row.epsilon:.3f}", flush=True)

        ckpt, curve, _ = train_experiment(cfg, args.variant, None, out, progress)
        print(f"wrote {ckpt} and {curve}")
        return 0
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError, OSError) as e:
        print(f"povexplore: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
