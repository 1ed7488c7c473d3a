"""Miniature task language executed on provider nodes.

Programs are structured (no jumps): a body is a tuple of instructions and a
``Branch`` carries two nested blocks. Branch outcomes never depend on host
state; they are drawn from an explicit boolean oracle so that every run can be
replayed exactly.

Text format, one instruction per line::

    read 3
    compute 5
    branch r1 {
      send 2
    } {
      halt
    }

``#`` starts a comment. Braces may share a line with the branch or sit on
their own lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional, Union

from trustgrid.errors import GuestSyntaxError, LimitExceeded, OracleExhausted, TooManyBranches
from trustgrid.federation import Capability

MAX_INSTRUCTIONS = 10_000
MAX_ENUMERABLE_BRANCHES = 20
NUM_REGISTERS = 16
STATE_REGISTER = 14
HALT_FLAG_REGISTER = 15


class GuestEvent(Enum):
    READ = "read"
    WRITE = "write"
    SEND = "send"
    COMPUTE = "compute"

    def __str__(self) -> str:
        return self.value


# -- instructions --------------------------------------------------------------

@dataclass(frozen=True)
class Read:
    region: int


@dataclass(frozen=True)
class Write:
    region: int


@dataclass(frozen=True)
class Compute:
    units: int


@dataclass(frozen=True)
class Send:
    target: int


@dataclass(frozen=True)
class Branch:
    register: int
    then: tuple = ()
    orelse: tuple = ()


@dataclass(frozen=True)
class Halt:
    pass


# The next three only appear in programs produced by the rewriter. They keep
# the automaton state (as an index) in the reserved state register.

@dataclass(frozen=True)
class SetState:
    value: int


@dataclass(frozen=True)
class Guard:
    """Checks that ``event`` has a transition from the tracked state, halting
    the program (and raising the halt flag) when it does not. ``table`` holds
    ``(from_index, to_index)`` pairs."""

    event: GuestEvent
    table: tuple


@dataclass(frozen=True)
class Track:
    """Unchecked state update for a point proven safe by static analysis."""

    event: GuestEvent
    table: tuple


Instruction = Union[Read, Write, Compute, Send, Branch, Halt, SetState, Guard, Track]

_EVENT_OF = {
    Read: GuestEvent.READ,
    Write: GuestEvent.WRITE,
    Send: GuestEvent.SEND,
    Compute: GuestEvent.COMPUTE,
}

_CAP_OF = {
    GuestEvent.READ: Capability.READ_HOST_DATA,
    GuestEvent.WRITE: Capability.WRITE_HOST_DATA,
    GuestEvent.SEND: Capability.SEND_MESSAGE,
    GuestEvent.COMPUTE: Capability.COMPUTE,
}


def event_of(instr: Instruction) -> Optional[GuestEvent]:
    """The security-relevant event an instruction emits, if any."""
    return _EVENT_OF.get(type(instr))


def capability_for(event: GuestEvent) -> Capability:
    return _CAP_OF[event]


@dataclass(frozen=True)
class GuestProgram:
    body: tuple
    declared_caps: frozenset = field(default=None)

    def __post_init__(self):
        if self.declared_caps is None:
            object.__setattr__(self, "declared_caps", required_caps(self.body))


def iter_instructions(body: Iterable[Instruction]) -> Iterator[Instruction]:
    for instr in body:
        yield instr
        if isinstance(instr, Branch):
            yield from iter_instructions(instr.then)
            yield from iter_instructions(instr.orelse)


def iter_points(body: Iterable[Instruction], prefix: tuple = ()) -> Iterator[tuple]:
    """Yield ``(point, instruction)`` in program order. A point is a path of
    indices with ``0``/``1`` selecting the then/else block of a branch."""
    for i, instr in enumerate(body):
        point = prefix + (i,)
        yield point, instr
        if isinstance(instr, Branch):
            yield from iter_points(instr.then, point + (0,))
            yield from iter_points(instr.orelse, point + (1,))


def instruction_count(body: Iterable[Instruction]) -> int:
    return sum(1 for _ in iter_instructions(body))


def branch_count(body: Iterable[Instruction]) -> int:
    return sum(isinstance(i, Branch) for i in iter_instructions(body))


def required_caps(program: GuestProgram | Iterable[Instruction]) -> frozenset:
    body = program.body if isinstance(program, GuestProgram) else program
    return frozenset(
        _CAP_OF[ev] for ev in (event_of(i) for i in iter_instructions(body)) if ev is not None
    )


# -- text format -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"[{}]|[^\s{}]+")
_NEWLINE = "\n"
_EOF = ""


def _tokenize(text: str) -> list:
    tokens = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        for match in _TOKEN_RE.finditer(line):
            tokens.append((match.group(), lineno))
        tokens.append((_NEWLINE, lineno))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.count = 0

    def peek(self) -> tuple:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos]
        last = self.tokens[-1][1] if self.tokens else 1
        return (_EOF, last)

    def next(self) -> tuple:
        tok = self.peek()
        self.pos += 1
        return tok

    def skip_newlines(self) -> None:
        while self.peek()[0] == _NEWLINE:
            self.pos += 1

    def expect(self, text: str) -> None:
        tok, line = self.next()
        if tok != text:
            raise GuestSyntaxError(line, f"expected {text!r}, found {tok or 'end of input'!r}")

    def number(self, what: str, low: int, high: Optional[int] = None) -> int:
        tok, line = self.next()
        if not re.fullmatch(r"\d+", tok):
            raise GuestSyntaxError(line, f"expected {what}, found {tok or 'end of line'!r}")
        value = int(tok)
        if value < low or (high is not None and value > high):
            bound = f"[{low}, {high}]" if high is not None else f">= {low}"
            raise GuestSyntaxError(line, f"{what} {value} out of range {bound}")
        return value

    def block(self, nested: bool) -> tuple:
        body = []
        while True:
            self.skip_newlines()
            tok, line = self.peek()
            if tok == _EOF:
                if nested:
                    raise GuestSyntaxError(line, "unclosed block")
                return tuple(body)
            if tok == "}":
                if not nested:
                    raise GuestSyntaxError(line, "unexpected '}'")
                self.pos += 1
                return tuple(body)
            body.append(self.instruction())
            end, line = self.peek()
            if end not in (_NEWLINE, "}", _EOF):
                raise GuestSyntaxError(line, f"unexpected {end!r} after instruction")

    def instruction(self) -> Instruction:
        tok, line = self.next()
        self.count += 1
        if self.count > MAX_INSTRUCTIONS:
            raise LimitExceeded(f"more than {MAX_INSTRUCTIONS} instructions")
        if tok == "read":
            return Read(self.number("region", 0, NUM_REGISTERS - 1))
        if tok == "write":
            return Write(self.number("region", 0, NUM_REGISTERS - 1))
        if tok == "compute":
            return Compute(self.number("compute units", 1))
        if tok == "send":
            return Send(self.number("node id", 0))
        if tok == "halt":
            return Halt()
        if tok == "branch":
            reg, reg_line = self.next()
            m = re.fullmatch(r"r(\d+)", reg)
            if not m or int(m.group(1)) >= NUM_REGISTERS:
                raise GuestSyntaxError(reg_line, f"expected register r0..r15, found {reg!r}")
            self.skip_newlines()
            self.expect("{")
            then = self.block(nested=True)
            self.skip_newlines()
            self.expect("{")
            orelse = self.block(nested=True)
            return Branch(int(m.group(1)), then, orelse)
        raise GuestSyntaxError(line, f"unknown instruction {tok!r}")


def parse_program(text: str) -> GuestProgram:
    return GuestProgram(_Parser(text).block(nested=False))


def format_program(program: GuestProgram | Iterable[Instruction], indent: int = 0) -> str:
    """Pretty-print a program. Output of guest programs re-parses to the same
    structure; guard instructions from the rewriter print but do not parse."""
    body = program.body if isinstance(program, GuestProgram) else program
    lines = []
    _format_block(body, indent, lines)
    return "\n".join(lines) + ("\n" if lines else "")


def _table_text(table: tuple) -> str:
    return ",".join(f"{a}:{b}" for a, b in table) or "-"


def _format_block(body, depth: int, lines: list) -> None:
    pad = "  " * depth
    for instr in body:
        if isinstance(instr, Read):
            lines.append(f"{pad}read {instr.region}")
        elif isinstance(instr, Write):
            lines.append(f"{pad}write {instr.region}")
        elif isinstance(instr, Compute):
            lines.append(f"{pad}compute {instr.units}")
        elif isinstance(instr, Send):
            lines.append(f"{pad}send {instr.target}")
        elif isinstance(instr, Halt):
            lines.append(f"{pad}halt")
        elif isinstance(instr, Branch):
            lines.append(f"{pad}branch r{instr.register} {{")
            _format_block(instr.then, depth + 1, lines)
            lines.append(f"{pad}}} {{")
            _format_block(instr.orelse, depth + 1, lines)
            lines.append(f"{pad}}}")
        elif isinstance(instr, SetState):
            lines.append(f"{pad}setstate {instr.value}")
        elif isinstance(instr, Guard):
            lines.append(f"{pad}guard {instr.event} {_table_text(instr.table)}")
        elif isinstance(instr, Track):
            lines.append(f"{pad}track {instr.event} {_table_text(instr.table)}")
        else:  # pragma: no cover
            raise TypeError(instr)


# -- execution -------------------------------------------------------------------

class Termination(Enum):
    COMPLETED = "completed"
    TRUNCATED = "truncated"


@dataclass(frozen=True)
class Trace:
    events: tuple
    terminated_by: Termination = Termination.COMPLETED
    truncated_at: Optional[int] = None
    guards_checked: int = 0

    @property
    def truncated(self) -> bool:
        return self.terminated_by is Termination.TRUNCATED


class _Machine:
    def __init__(self, oracle: Iterable[bool], commit: Optional[Callable[[GuestEvent], bool]]):
        self.oracle = iter(oracle)
        self.commit = commit
        self.regs = [0] * NUM_REGISTERS
        self.events: list = []
        self.guards = 0
        self.truncated = False

    def run(self, body) -> bool:
        """Execute a block; returns False once the program has stopped."""
        for instr in body:
            if isinstance(instr, Branch):
                try:
                    taken = bool(next(self.oracle))
                except StopIteration:
                    raise OracleExhausted("branch oracle has no value left") from None
                self.regs[instr.register] = int(taken)
                if not self.run(instr.then if taken else instr.orelse):
                    return False
            elif isinstance(instr, Halt):
                return False
            elif isinstance(instr, SetState):
                self.regs[STATE_REGISTER] = instr.value
            elif isinstance(instr, (Guard, Track)):
                nxt = dict(instr.table).get(self.regs[STATE_REGISTER])
                if isinstance(instr, Guard):
                    self.guards += 1
                if nxt is None:
                    if isinstance(instr, Track):
                        raise RuntimeError("unchecked transition undefined; static analysis was wrong")
                    self.regs[HALT_FLAG_REGISTER] = 1
                    self.truncated = True
                    return False
                self.regs[STATE_REGISTER] = nxt
            else:
                event = _EVENT_OF[type(instr)]
                if self.commit is not None and not self.commit(event):
                    self.truncated = True
                    return False
                self.events.append(event)
        return True

    def trace(self) -> Trace:
        if self.truncated:
            return Trace(tuple(self.events), Termination.TRUNCATED, len(self.events), self.guards)
        return Trace(tuple(self.events), Termination.COMPLETED, None, self.guards)


def execute(
    program: GuestProgram | Iterable[Instruction],
    branch_oracle: Iterable[bool],
    commit: Optional[Callable[[GuestEvent], bool]] = None,
) -> Trace:
    """Run a program. ``commit`` is called before each event is emitted; a
    false return stops the program without emitting that event."""
    body = program.body if isinstance(program, GuestProgram) else tuple(program)
    machine = _Machine(branch_oracle, commit)
    machine.run(body)
    return machine.trace()


def execute_unmonitored(program: GuestProgram | Iterable[Instruction], branch_oracle: Iterable[bool]) -> Trace:
    return execute(program, branch_oracle)


def enumerate_paths(program: GuestProgram | Iterable[Instruction]) -> frozenset:
    """Every distinct completed trace over all branch outcomes."""
    body = program.body if isinstance(program, GuestProgram) else tuple(program)
    if branch_count(body) > MAX_ENUMERABLE_BRANCHES:
        raise TooManyBranches(f"more than {MAX_ENUMERABLE_BRANCHES} branches")
    return frozenset(Trace(events) for events, _ in _block_paths(body))


def _block_paths(body) -> set:
    paths = {((), False)}
    for instr in body:
        step = _instr_paths(instr)
        extended = set()
        for events, halted in paths:
            if halted:
                extended.add((events, True))
                continue
            for more, stop in step:
                extended.add((events + more, stop))
        paths = extended
    return paths


def _instr_paths(instr) -> set:
    if isinstance(instr, Branch):
        return _block_paths(instr.then) | _block_paths(instr.orelse)
    if isinstance(instr, Halt):
        return {((), True)}
    if isinstance(instr, (Guard, Track, SetState)):
        raise ValueError("path enumeration is defined for guest programs only")
    return {((_EVENT_OF[type(instr)],), False)}
