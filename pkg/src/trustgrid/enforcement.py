"""Security automata and the four enforcement mechanisms: execution
monitoring, static analysis, program rewriting (inlined guards), and the
combination of static analysis with residual guards.

Policies are safety properties. A missing transition is a violation and is
always handled by truncation: the program stops before the offending event.

Policy file format::

    policy nsar
    states S0 S1
    initial S0
    on S0 read -> S1
    on S0 send -> S0

Any (state, event) pair without an ``on`` line is a violating transition.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

from trustgrid.errors import PolicyError, ReservedRegisterError
from trustgrid.guest import (
    HALT_FLAG_REGISTER,
    STATE_REGISTER,
    Branch,
    GuestEvent,
    GuestProgram,
    Guard,
    Halt,
    SetState,
    Trace,
    Track,
    event_of,
    execute,
    iter_instructions,
    iter_points,
)

MAX_STATES = 64


@dataclass(frozen=True)
class SecurityAutomaton:
    policy_id: str
    states: tuple
    initial: str
    delta: dict = field(hash=False)

    def __post_init__(self):
        if not self.states:
            raise ValueError("automaton needs at least one state")
        if len(self.states) > MAX_STATES:
            raise ValueError(f"at most {MAX_STATES} states")
        if len(set(self.states)) != len(self.states):
            raise ValueError("duplicate state names")
        if self.initial not in self.states:
            raise ValueError(f"initial state {self.initial!r} not declared")
        known = set(self.states)
        for (src, event), dst in self.delta.items():
            if src not in known or dst not in known or not isinstance(event, GuestEvent):
                raise ValueError(f"bad transition {src} {event} -> {dst}")

    def index(self, state: str) -> int:
        return self.states.index(state)

    def has_transition(self, state: str, event: GuestEvent) -> bool:
        return (state, event) in self.delta

    def transition_table(self, event: GuestEvent) -> tuple:
        """``(from_index, to_index)`` pairs for one event, sorted."""
        return tuple(sorted(
            (self.index(src), self.index(dst))
            for (src, ev), dst in self.delta.items()
            if ev is event
        ))


# -- policy text ---------------------------------------------------------------

_NAME = r"[A-Za-z_][A-Za-z0-9_.-]*"


def parse_policy(text: str) -> SecurityAutomaton:
    policy_id = states = initial = None
    delta: dict = {}
    pending: list = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0]
        if head == "policy":
            if len(words) != 2 or not re.fullmatch(_NAME, words[1]):
                raise PolicyError(lineno, "expected 'policy <id>'")
            if policy_id is not None:
                raise PolicyError(lineno, "duplicate policy line")
            policy_id = words[1]
        elif head == "states":
            if len(words) < 2 or not all(re.fullmatch(_NAME, w) for w in words[1:]):
                raise PolicyError(lineno, "expected 'states <name> ...'")
            if states is not None:
                raise PolicyError(lineno, "duplicate states line")
            if len(set(words[1:])) != len(words) - 1:
                raise PolicyError(lineno, "duplicate state name")
            if len(words) - 1 > MAX_STATES:
                raise PolicyError(lineno, f"more than {MAX_STATES} states")
            states = tuple(words[1:])
        elif head == "initial":
            if len(words) != 2:
                raise PolicyError(lineno, "expected 'initial <state>'")
            if initial is not None:
                raise PolicyError(lineno, "duplicate initial line")
            initial = (words[1], lineno)
        elif head == "on":
            if len(words) != 5 or words[3] != "->":
                raise PolicyError(lineno, "expected 'on <state> <event> -> <state>'")
            try:
                event = GuestEvent(words[2])
            except ValueError:
                raise PolicyError(lineno, f"unknown event {words[2]!r}") from None
            pending.append((lineno, words[1], event, words[4]))
        else:
            raise PolicyError(lineno, f"unknown directive {head!r}")
    last = len(text.splitlines()) or 1
    if policy_id is None:
        raise PolicyError(last, "missing 'policy' line")
    if states is None:
        raise PolicyError(last, "missing 'states' line")
    if initial is None:
        raise PolicyError(last, "missing 'initial' line")
    if initial[0] not in states:
        raise PolicyError(initial[1], f"initial state {initial[0]!r} not declared")
    for lineno, src, event, dst in pending:
        for name in (src, dst):
            if name not in states:
                raise PolicyError(lineno, f"undeclared state {name!r}")
        if (src, event) in delta and delta[(src, event)] != dst:
            raise PolicyError(lineno, f"conflicting transition for ({src}, {event})")
        delta[(src, event)] = dst
    return SecurityAutomaton(policy_id, states, initial[0], delta)


def format_policy(a: SecurityAutomaton) -> str:
    lines = [f"policy {a.policy_id}", "states " + " ".join(a.states), f"initial {a.initial}"]
    order = {ev: i for i, ev in enumerate(GuestEvent)}
    for (src, ev), dst in sorted(a.delta.items(), key=lambda kv: (a.index(kv[0][0]), order[kv[0][1]])):
        lines.append(f"on {src} {ev.value} -> {dst}")
    return "\n".join(lines) + "\n"


# -- verdicts ------------------------------------------------------------------

@dataclass(frozen=True)
class AcceptedStatically:
    pass


@dataclass(frozen=True)
class RejectedStatically:
    witness: Trace


@dataclass(frozen=True)
class MonitoredOk:
    trace: Trace
    guard_count: int = 0


@dataclass(frozen=True)
class MonitoredTruncated:
    trace: Trace
    violation_index: int
    guard_count: int = 0


@dataclass(frozen=True)
class Rewritten:
    program: GuestProgram
    guard_count: int


Verdict = Union[AcceptedStatically, RejectedStatically, MonitoredOk, MonitoredTruncated, Rewritten]


class Mechanism(Enum):
    MONITOR = "monitor"
    STATIC = "static"
    REWRITE = "rewrite"
    COMBINED = "combined"


# -- execution monitoring ------------------------------------------------------

def automaton_step(a: SecurityAutomaton, state: str, event: GuestEvent) -> Optional[str]:
    """Next state, or None when the transition is undefined (a violation)."""
    if state not in a.states:
        raise ValueError(f"{state!r} is not a state of {a.policy_id}")
    return a.delta.get((state, event))


def longest_safe_prefix(a: SecurityAutomaton, trace: Trace | Iterable[GuestEvent]) -> int:
    events = trace.events if isinstance(trace, Trace) else tuple(trace)
    state = a.initial
    for k, event in enumerate(events):
        if (state, event) not in a.delta:
            return k
        state = a.delta[(state, event)]
    return len(events)


class _Monitor:
    def __init__(self, a: SecurityAutomaton):
        self.automaton = a
        self.state = a.initial

    def __call__(self, event: GuestEvent) -> bool:
        nxt = automaton_step(self.automaton, self.state, event)
        if nxt is None:
            return False
        self.state = nxt
        return True


def run_monitor(a: SecurityAutomaton, program: GuestProgram, branch_oracle: Iterable[bool]):
    trace = execute(program, branch_oracle, commit=_Monitor(a))
    if trace.truncated:
        return MonitoredTruncated(trace, trace.truncated_at)
    return MonitoredOk(trace)


# -- static analysis -----------------------------------------------------------

@dataclass
class Analysis:
    """Per-point reachable automaton states and the violations found.

    ``states_at`` maps every event-emitting or branch point to the set of
    states the automaton may be in just before it. ``violations`` lists
    ``(point, witness_events)`` in program order; each witness is a concrete
    path ending in the violating event.
    """

    states_at: dict
    violations: list

    def unsafe_points(self) -> set:
        return {point for point, _ in self.violations}


def analyze(a: SecurityAutomaton, program: GuestProgram) -> Analysis:
    result = Analysis({}, [])
    _analyze_block(a, program.body, (), {a.initial: ()}, result)
    return result


def _analyze_block(a, body, prefix, env: dict, out: Analysis) -> dict:
    # env maps reachable state -> one concrete event path reaching it
    for i, instr in enumerate(body):
        point = prefix + (i,)
        if isinstance(instr, Branch):
            out.states_at[point] = frozenset(env)
            then_env = _analyze_block(a, instr.then, point + (0,), dict(env), out)
            else_env = _analyze_block(a, instr.orelse, point + (1,), dict(env), out)
            env = dict(then_env)
            for state, path in else_env.items():
                env.setdefault(state, path)
        elif isinstance(instr, Halt):
            env = {}
        else:
            event = event_of(instr)
            if event is None:
                raise ValueError(f"cannot analyze instruction {instr!r}")
            out.states_at[point] = frozenset(env)
            nxt_env: dict = {}
            for state, path in env.items():
                nxt = a.delta.get((state, event))
                if nxt is None:
                    # truncation stops this path; nothing flows onward
                    out.violations.append((point, path + (event,)))
                else:
                    nxt_env.setdefault(nxt, path + (event,))
            env = nxt_env
    return env


def static_analyze(a: SecurityAutomaton, program: GuestProgram):
    analysis = analyze(a, program)
    if analysis.violations:
        return RejectedStatically(Trace(analysis.violations[0][1]))
    return AcceptedStatically()


# -- rewriting -----------------------------------------------------------------

def _check_reserved(program: GuestProgram) -> None:
    for instr in iter_instructions(program.body):
        if isinstance(instr, Branch) and instr.register in (STATE_REGISTER, HALT_FLAG_REGISTER):
            raise ReservedRegisterError(
                f"register r{instr.register} is reserved for inlined guards"
            )
        if isinstance(instr, (Guard, Track, SetState)):
            raise ReservedRegisterError("program already contains guard instructions")


def _instrument(a: SecurityAutomaton, body, prefix, guarded: set, tracked: set, counter: list) -> tuple:
    out = []
    for i, instr in enumerate(body):
        point = prefix + (i,)
        if isinstance(instr, Branch):
            out.append(Branch(
                instr.register,
                _instrument(a, instr.then, point + (0,), guarded, tracked, counter),
                _instrument(a, instr.orelse, point + (1,), guarded, tracked, counter),
            ))
            continue
        event = event_of(instr)
        if event is not None and point in guarded:
            out.append(Guard(event, a.transition_table(event)))
            counter[0] += 1
        elif event is not None and point in tracked:
            out.append(Track(event, a.transition_table(event)))
        out.append(instr)
    return tuple(out)


def rewrite(a: SecurityAutomaton, program: GuestProgram) -> Rewritten:
    """Inline a guard before every event-emitting instruction."""
    _check_reserved(program)
    points = {p for p, instr in iter_points(program.body) if event_of(instr) is not None}
    counter = [0]
    body = _instrument(a, program.body, (), points, set(), counter)
    new_body = (SetState(a.index(a.initial)),) + body
    return Rewritten(GuestProgram(new_body, program.declared_caps), counter[0])


# -- combined ------------------------------------------------------------------

@dataclass(frozen=True)
class CombinedPlan:
    program: GuestProgram
    guard_count: int
    analysis: Analysis = field(compare=False)

    @property
    def guarded_points(self) -> set:
        return self.analysis.unsafe_points()


def plan_combined(a: SecurityAutomaton, program: GuestProgram) -> CombinedPlan:
    """Guard only the points where some reachable state lacks a transition.

    Points proven safe run unguarded. When residual guards exist, safe points
    that may change the automaton state get an unchecked ``Track`` so later
    guards see the right state.
    """
    _check_reserved(program)
    analysis = analyze(a, program)
    residual = analysis.unsafe_points()
    if not residual:
        return CombinedPlan(program, 0, analysis)
    tracked = set()
    for point, instr in iter_points(program.body):
        event = event_of(instr)
        if event is None or point in residual:
            continue
        if any(a.delta[(s, event)] != s for s in analysis.states_at.get(point, ())):
            tracked.add(point)
    counter = [0]
    body = _instrument(a, program.body, (), residual, tracked, counter)
    new_body = (SetState(a.index(a.initial)),) + body
    return CombinedPlan(GuestProgram(new_body, program.declared_caps), counter[0], analysis)


def run_combined(a: SecurityAutomaton, program: GuestProgram, branch_oracle: Iterable[bool]):
    plan = plan_combined(a, program)
    trace = execute(plan.program, branch_oracle)
    if trace.truncated:
        return MonitoredTruncated(trace, trace.truncated_at, plan.guard_count)
    return MonitoredOk(trace, plan.guard_count)


# -- one entry point for hosts -------------------------------------------------

@dataclass(frozen=True)
class Enforced:
    """What a host committed when running a program under a mechanism."""

    mechanism: Mechanism
    verdict: Verdict
    committed: tuple
    violation_index: Optional[int]
    guard_count: int = 0

    @property
    def violated(self) -> bool:
        return self.violation_index is not None


def enforce(
    a: SecurityAutomaton,
    program: GuestProgram,
    branch_oracle: Iterable[bool],
    mechanism: Mechanism,
) -> Enforced:
    if mechanism is Mechanism.MONITOR:
        verdict = run_monitor(a, program, branch_oracle)
        index = getattr(verdict, "violation_index", None)
        return Enforced(mechanism, verdict, verdict.trace.events, index)
    if mechanism is Mechanism.STATIC:
        verdict = static_analyze(a, program)
        if isinstance(verdict, RejectedStatically):
            # rejected programs never start
            return Enforced(mechanism, verdict, (), 0)
        trace = execute(program, branch_oracle)
        return Enforced(mechanism, verdict, trace.events, None)
    if mechanism is Mechanism.REWRITE:
        verdict = rewrite(a, program)
        trace = execute(verdict.program, branch_oracle)
        return Enforced(mechanism, verdict, trace.events, trace.truncated_at, verdict.guard_count)
    verdict = run_combined(a, program, branch_oracle)
    index = getattr(verdict, "violation_index", None)
    return Enforced(mechanism, verdict, verdict.trace.events, index, verdict.guard_count)
