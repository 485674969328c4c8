"""Command-line entry point.

Every subcommand shares --config (JSON file), --seed (overrides the config
seed), and --out (artifact directory).  Success prints a one-line JSON summary
on stdout and exits 0; any failure prints a machine-readable error object on
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from regrasp import harness

_COMMANDS = {
    "collect": harness.cmd_collect,
    "train": harness.cmd_train,
    "calibrate": harness.cmd_calibrate,
    "eval-model": harness.cmd_eval_model,
    "eval-policy": harness.cmd_eval_policy,
    "eval-min-force": harness.cmd_eval_min_force,
    "analyze-force-sweep": harness.cmd_analyze_force_sweep,
    "analyze-height-sweep": harness.cmd_analyze_height_sweep,
    "action-hist": harness.cmd_action_histogram,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, default=None, help="JSON config file")
    shared.add_argument("--seed", type=int, default=None, help="override the config seed")
    shared.add_argument(
        "--out", type=Path, default=Path("out"), help="output directory (default ./out)"
    )
    shared.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    parser = argparse.ArgumentParser(
        prog="regrasp",
        description="Simulated visuo-tactile regrasping: data, models, policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[shared], help=f"run {name.replace('-', ' ')}")
    replay = sub.add_parser("replay", parents=[shared], help="re-run one recorded episode")
    replay.add_argument("episode_id", help="episode id from a trace or dataset")
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    with path.open() as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise harness.ConfigError("config file must contain a JSON object")
    return obj


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "replay":
            summary = harness.cmd_replay(config, seed, out, args.episode_id)
        else:
            summary = _COMMANDS[args.command](config, seed, out)
        print(json.dumps(summary, sort_keys=True))
        return 0
    except Exception as exc:  # error contract: machine-readable JSON on stderr
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
