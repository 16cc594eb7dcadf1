"""Command-line scenario runner and inspection tool.

    peermail run <scenario> [--seed N] [--log PATH] [--metrics PATH]
                 [--dump-mailboxes PATH] [--dump-ledgers PATH]
    peermail check <scenario>
    peermail demo-keys --seed N

``run`` prints the event log (including one pass/fail line per ASSERT)
to stdout and exits 0 on success, 1 on assertion failure, 2 on a scenario
error.  All artifacts are byte-stable for a fixed scenario and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .identity import derive_address, generate_identity, generate_mail_key
from .runner import run_scenario
from .scenario import ScenarioParseError, parse_scenario
from .simnet import ScenarioError


def _load(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        raise SystemExit(2)
    try:
        return parse_scenario(text)
    except ScenarioParseError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        raise SystemExit(2)


def _cmd_run(args) -> int:
    scenario = _load(args.scenario)
    try:
        result = run_scenario(scenario, seed=args.seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(result.log_text)
    if args.log:
        Path(args.log).write_text(result.log_text, encoding="utf-8")
    if args.metrics:
        Path(args.metrics).write_text(result.metrics_text, encoding="utf-8")
    if args.dump_mailboxes:
        Path(args.dump_mailboxes).write_text(result.mailboxes_text, encoding="utf-8")
    if args.dump_ledgers:
        Path(args.dump_ledgers).write_text(result.ledgers_text, encoding="utf-8")
    for failure in result.failures:
        print(f"assertion failed: {failure}", file=sys.stderr)
    return result.exit_code


def _cmd_check(args) -> int:
    scenario = _load(args.scenario)
    print(f"{args.scenario}: {len(scenario.directives)} directives ok")
    return 0


def _cmd_demo_keys(args) -> int:
    keypair = generate_identity(args.seed)
    mail = generate_mail_key(args.seed)
    address = derive_address(keypair.public, args.localpart)
    print(f"seed={args.seed}")
    print(f"address={address.render()}")
    print(f"fingerprint={mail.fingerprint}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="peermail", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario to quiescence")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--log")
    p_run.add_argument("--metrics")
    p_run.add_argument("--dump-mailboxes")
    p_run.add_argument("--dump-ledgers")
    p_run.set_defaults(func=_cmd_run)

    p_check = sub.add_parser("check", help="parse a scenario without running it")
    p_check.add_argument("scenario")
    p_check.set_defaults(func=_cmd_check)

    p_keys = sub.add_parser("demo-keys", help="print the address and fingerprint for a seed")
    p_keys.add_argument("--seed", type=int, required=True)
    p_keys.add_argument("--localpart", default="user")
    p_keys.set_defaults(func=_cmd_demo_keys)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
