"""Command-line entry point.

Exit codes: 0 success, 1 scenario/policy/program error, 2 golden-trace
mismatch, 3 audit failure. Data goes to files or stdout, diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from trustgrid.enforcement import (
    AcceptedStatically,
    Mechanism,
    RejectedStatically,
    enforce,
    parse_policy,
)
from trustgrid.errors import (
    GuestSyntaxError,
    LimitExceeded,
    PolicyError,
    ReservedRegisterError,
    ScenarioError,
)
from trustgrid.guest import branch_count, parse_program
from trustgrid.scenario import PURPOSE_BRANCH, derive_rng, load_scenario
from trustgrid.simulator import Simulation

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_MISMATCH = 2
EXIT_AUDIT = 3

MECHANISMS = [m.value for m in Mechanism]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for golden mismatches
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trustgrid", description="Volunteer-grid trust simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario and write its trace and metrics")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--trace-out", type=Path, help="trace file (default: stdout)")
    run.add_argument("--metrics-out", type=Path, help="metrics file (default: stdout)")
    run.add_argument("--mechanism", choices=MECHANISMS, help="override the enforcement mechanism")

    verify = sub.add_parser("verify", help="re-run a scenario and compare with a golden trace")
    verify.add_argument("--scenario", required=True, type=Path)
    verify.add_argument("--golden", required=True, type=Path)

    check = sub.add_parser("check-policy", help="enforce one policy on one program")
    check.add_argument("--policy", required=True, type=Path)
    check.add_argument("--program", required=True, type=Path)
    check.add_argument("--mode", required=True, choices=MECHANISMS)
    return parser


def _fail(message: str, code: int = EXIT_INPUT) -> int:
    print(message, file=sys.stderr)
    return code


def _simulate(path: Path, seed=None, mechanism=None):
    scenario = load_scenario(path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if mechanism is not None:
        changes["mechanism"] = Mechanism(mechanism)
    if changes:
        scenario = dataclasses.replace(scenario, **changes)
    sim = Simulation(scenario)
    trace, metrics = sim.run()
    return sim, trace.to_text(), metrics.to_text()


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def cmd_run(args) -> int:
    try:
        sim, trace, metrics = _simulate(args.scenario, args.seed, args.mechanism)
    except ScenarioError as exc:
        return _fail(str(exc))
    try:
        _emit(trace, args.trace_out)
        _emit(metrics, args.metrics_out)
    except OSError as exc:
        return _fail(f"{exc.filename}: {exc.strerror}")
    problems = sim.audit()
    for problem in problems:
        print(f"audit: {problem}", file=sys.stderr)
    return EXIT_AUDIT if problems else EXIT_OK


def first_divergence(expected: str, actual: str):
    """1-based line number of the first difference, or None if equal."""
    if expected == actual:
        return None
    ours, theirs = expected.splitlines(keepends=True), actual.splitlines(keepends=True)
    for number, (a, b) in enumerate(zip(ours, theirs), start=1):
        if a != b:
            return number
    return min(len(ours), len(theirs)) + 1


def cmd_verify(args) -> int:
    try:
        golden = args.golden.read_text()
    except OSError as exc:
        return _fail(f"{args.golden}: {exc.strerror}")
    try:
        sim, trace, _ = _simulate(args.scenario)
    except ScenarioError as exc:
        return _fail(str(exc))
    line = first_divergence(golden, trace)
    if line is not None:
        return _fail(f"{args.golden}:{line}: trace diverges from golden", EXIT_MISMATCH)
    problems = sim.audit()
    for problem in problems:
        print(f"audit: {problem}", file=sys.stderr)
    return EXIT_AUDIT if problems else EXIT_OK


def verdict_lines(enforced) -> dict:
    verdict = enforced.verdict
    events = ",".join(e.value for e in enforced.committed) or "-"
    if isinstance(verdict, AcceptedStatically):
        return {"verdict": "accepted_static"}
    if isinstance(verdict, RejectedStatically):
        witness = ",".join(e.value for e in verdict.witness.events) or "-"
        return {"verdict": "rejected_static", "witness": witness}
    out = {"events": events, "guards": enforced.guard_count}
    if enforced.violated:
        out.update(verdict="truncated", index=enforced.violation_index)
    else:
        out["verdict"] = "ok"
    return out


def cmd_check_policy(args) -> int:
    try:
        policy_text = args.policy.read_text()
        program_text = args.program.read_text()
    except OSError as exc:
        return _fail(f"{exc.filename}: {exc.strerror}")
    try:
        automaton = parse_policy(policy_text)
    except PolicyError as exc:
        return _fail(f"{args.policy}:{exc.line}: {exc.message}")
    try:
        program = parse_program(program_text)
    except GuestSyntaxError as exc:
        return _fail(f"{args.program}:{exc.line}: {exc.message}")
    except LimitExceeded as exc:
        return _fail(f"{args.program}: {exc}")
    rng = derive_rng(0, PURPOSE_BRANCH)
    oracle = [rng.random() < 0.5 for _ in range(branch_count(program.body))]
    try:
        enforced = enforce(automaton, program, oracle, Mechanism(args.mode))
    except ReservedRegisterError as exc:
        return _fail(f"{args.program}: {exc}")
    fields = verdict_lines(enforced)
    sys.stdout.write("".join(f"{k}={fields[k]}\n" for k in sorted(fields)))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "check-policy": cmd_check_policy}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
