"""Scenario files and node churn.

A scenario is a line-oriented file with ``[sim]``, ``[nodes]``, ``[policy]``,
``[jobs]`` and one ``[program NAME]`` section per guest program::

    [sim]
    seed = 7
    horizon = 500
    busy_fraction = 0.05

    [nodes]
    1 role=provider churn=always
    2 role=provider churn=script events=0:up,40:down
    3 role=provider churn=exp start=up on_mean=80 off_mean=20 on_min=30
    9 role=user churn=always

    [policy]
    policy allow-all
    ...

    [program p]
    compute 4

    [jobs]
    1 owner=9 submit=0 tasks=p:10,p:12

Numeric values are integers, except ``busy_fraction`` which is a decimal in
[0, 1]. ``#`` starts a comment everywhere except inside ``[policy]`` and
``[program]`` bodies, where the embedded formats treat it the same way.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional

from trustgrid.enforcement import Mechanism, SecurityAutomaton, format_policy, parse_policy
from trustgrid.errors import GuestSyntaxError, LimitExceeded, PolicyError, ScenarioError
from trustgrid.guest import GuestProgram, format_program, parse_program

DEFAULT_BUSY_FRACTION = Fraction(5, 100)

# stream namespaces; XORed into the scenario seed
PURPOSE_CHURN = 0x43485552
PURPOSE_BRANCH = 0x4252414E
PURPOSE_KEY = 0x4B455953


def derive_rng(seed: int, purpose: int, index: int = 0) -> random.Random:
    return random.Random(f"{seed ^ purpose}:{index}")


class Role(Enum):
    PROVIDER = "provider"
    USER = "user"
    BOTH = "both"

    @property
    def provides(self) -> bool:
        return self is not Role.USER


class ChurnKind(Enum):
    ALWAYS = "always"
    SCRIPT = "script"
    EXP = "exp"


class ChurnEvent(Enum):
    CONNECT = "Connect"
    DISCONNECT = "Disconnect"


@dataclass(frozen=True)
class ChurnSpec:
    kind: ChurnKind = ChurnKind.ALWAYS
    script: tuple = ()  # (time, ChurnEvent)
    start_up: bool = True
    on_mean: int = 0
    off_mean: int = 0
    on_min: int = 1
    off_min: int = 1


@dataclass(frozen=True)
class NodeSpec:
    node: int
    role: Role = Role.PROVIDER
    churn: ChurnSpec = ChurnSpec()
    compromised_at: Optional[int] = None
    slots: int = 1


@dataclass(frozen=True)
class TaskSpec:
    program_name: str
    duration: int


@dataclass(frozen=True)
class JobSpec:
    job_id: int
    owner: int
    submit: int
    tasks: tuple


@dataclass(frozen=True)
class Scenario:
    seed: int
    horizon: int
    nodes: tuple
    jobs: tuple
    policy: SecurityAutomaton
    programs: dict = field(hash=False)
    mechanism: Mechanism = Mechanism.MONITOR
    dissemination_latency: int = 1
    dispatch_latency: int = 1
    notification_latency: int = 0
    busy_fraction: Fraction = DEFAULT_BUSY_FRACTION
    retry_budget: int = 8
    cooldown: int = 10
    denylist: frozenset = frozenset()

    def node(self, node_id: int) -> NodeSpec:
        for spec in self.nodes:
            if spec.node == node_id:
                return spec
        raise KeyError(node_id)

    def program(self, name: str) -> GuestProgram:
        return self.programs[name]


# -- churn ---------------------------------------------------------------------

def churn_process(spec: ChurnSpec, seed: int, horizon: int, node: int = 0) -> list:
    """Timed Connect/Disconnect transitions for one node, strictly increasing,
    alternating, and cut at the horizon."""
    if spec.kind is ChurnKind.ALWAYS:
        return [(0, ChurnEvent.CONNECT)]
    if spec.kind is ChurnKind.SCRIPT:
        return [(t, ev) for t, ev in spec.script if t < horizon]
    rng = derive_rng(seed, PURPOSE_CHURN, node)
    out = []
    up = spec.start_up
    t = 0
    if not up:
        t = _holding(rng, spec.off_mean, spec.off_min)
        up = True
    while t < horizon:
        out.append((t, ChurnEvent.CONNECT if up else ChurnEvent.DISCONNECT))
        t += _holding(rng, spec.on_mean, spec.on_min) if up else _holding(rng, spec.off_mean, spec.off_min)
        up = not up
    return out


def _holding(rng: random.Random, mean: int, minimum: int) -> int:
    extra = int(rng.expovariate(1.0 / mean)) if mean > 0 else 0
    return max(1, minimum + extra)


# -- parsing -------------------------------------------------------------------

_SIM_INT_KEYS = {
    "seed", "horizon", "dissemination_latency", "dispatch_latency",
    "notification_latency", "retry_budget", "cooldown",
}
_SECTION_RE = re.compile(r"\[(sim|nodes|policy|jobs|program\s+([A-Za-z_][A-Za-z0-9_-]*))\]")


class _Loader:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, line: int, message: str):
        raise ScenarioError(line, message, self.source)

    def integer(self, value: str, line: int, what: str, low: Optional[int] = 0) -> int:
        if not re.fullmatch(r"-?\d+", value):
            self.fail(line, f"{what}: expected an integer, got {value!r}")
        number = int(value)
        if low is not None and number < low:
            self.fail(line, f"{what}: {number} out of range (must be >= {low})")
        return number

    def sections(self) -> list:
        out = []
        current = None
        for lineno, raw in enumerate(self.text.splitlines(), start=1):
            stripped = raw.strip()
            if stripped.startswith("["):
                m = _SECTION_RE.fullmatch(stripped.split("#", 1)[0].strip())
                if not m:
                    self.fail(lineno, f"unknown section {stripped!r}")
                name = "program" if m.group(2) else m.group(1)
                current = (name, m.group(2), lineno, [])
                out.append(current)
                continue
            if current is None:
                if stripped and not stripped.startswith("#"):
                    self.fail(lineno, "content before the first section")
                continue
            current[3].append((lineno, raw))
        return out

    @staticmethod
    def content(lines) -> list:
        out = []
        for lineno, raw in lines:
            text = raw.split("#", 1)[0].strip()
            if text:
                out.append((lineno, text))
        return out

    def pairs(self, words, lineno) -> dict:
        out = {}
        for word in words:
            if "=" not in word:
                self.fail(lineno, f"expected key=value, got {word!r}")
            key, value = word.split("=", 1)
            if key in out:
                self.fail(lineno, f"duplicate key {key!r}")
            out[key] = value
        return out

    def load(self) -> Scenario:
        sections = self.sections()
        seen = {}
        programs = {}
        for name, label, lineno, lines in sections:
            key = (name, label)
            if key in seen:
                self.fail(lineno, f"duplicate section [{name}{' ' + label if label else ''}]")
            seen[key] = lines
            if name == "program":
                body = "\n".join(raw for _, raw in lines)
                try:
                    programs[label] = parse_program(body)
                except GuestSyntaxError as exc:
                    self.fail(lines[0][0] + exc.line - 1 if lines else lineno, f"program {label}: {exc.message}")
                except LimitExceeded as exc:
                    self.fail(lineno, f"program {label}: {exc}")
        for required in ("sim", "nodes", "policy"):
            if (required, None) not in seen:
                self.fail(len(self.text.splitlines()) or 1, f"missing [{required}] section")

        sim = self.load_sim(seen[("sim", None)])
        policy_lines = seen[("policy", None)]
        try:
            policy = parse_policy("\n".join(raw for _, raw in policy_lines))
        except PolicyError as exc:
            start = policy_lines[0][0] if policy_lines else 1
            self.fail(start + exc.line - 1, f"policy: {exc.message}")
        nodes = self.load_nodes(seen[("nodes", None)])
        jobs = self.load_jobs(seen.get(("jobs", None), []), nodes, programs)
        return Scenario(nodes=nodes, jobs=jobs, policy=policy, programs=programs, **sim)

    def load_sim(self, lines) -> dict:
        out = {}
        where = {}
        for lineno, text in self.content(lines):
            if "=" not in text:
                self.fail(lineno, f"expected 'key = value', got {text!r}")
            key, value = (part.strip() for part in text.split("=", 1))
            if key in out:
                self.fail(lineno, f"duplicate key {key!r}")
            where[key] = lineno
            if key in _SIM_INT_KEYS:
                out[key] = self.integer(value, lineno, key)
            elif key == "busy_fraction":
                if not re.fullmatch(r"\d+(\.\d+)?", value):
                    self.fail(lineno, f"busy_fraction: expected a decimal, got {value!r}")
                fraction = Fraction(value)
                if fraction > 1:
                    self.fail(lineno, f"busy_fraction: {value} out of range [0, 1]")
                out[key] = fraction
            elif key == "mechanism":
                try:
                    out[key] = Mechanism(value)
                except ValueError:
                    self.fail(lineno, f"mechanism: unknown value {value!r}")
            elif key == "denylist":
                out[key] = frozenset(self.integer(v, lineno, "denylist") for v in value.replace(",", " ").split())
            else:
                self.fail(lineno, f"unknown [sim] key {key!r}")
        for key in ("seed", "horizon"):
            if key not in out:
                self.fail(lines[-1][0] if lines else 1, f"[sim] requires {key}")
        if out["horizon"] <= 0:
            self.fail(where["horizon"], "horizon must be > 0")
        return out

    def load_churn(self, opts: dict, lineno: int) -> ChurnSpec:
        kind_text = opts.pop("churn", "always")
        try:
            kind = ChurnKind(kind_text)
        except ValueError:
            self.fail(lineno, f"unknown churn kind {kind_text!r}")
        if kind is ChurnKind.ALWAYS:
            return ChurnSpec()
        if kind is ChurnKind.SCRIPT:
            if "events" not in opts:
                self.fail(lineno, "script churn needs events=T:up,T:down,...")
            script = []
            for item in opts.pop("events").split(","):
                m = re.fullmatch(r"(\d+):(up|down)", item)
                if not m:
                    self.fail(lineno, f"bad churn event {item!r}")
                script.append((int(m.group(1)), ChurnEvent.CONNECT if m.group(2) == "up" else ChurnEvent.DISCONNECT))
            for i, (t, ev) in enumerate(script):
                expected = ChurnEvent.CONNECT if i % 2 == 0 else ChurnEvent.DISCONNECT
                if ev is not expected:
                    self.fail(lineno, "script must alternate up/down starting with up")
                if i and t <= script[i - 1][0]:
                    self.fail(lineno, "script times must strictly increase")
            return ChurnSpec(ChurnKind.SCRIPT, tuple(script))
        start = opts.pop("start", "up")
        if start not in ("up", "down"):
            self.fail(lineno, f"start must be up or down, got {start!r}")
        params = {}
        for key, low in (("on_mean", 1), ("off_mean", 1), ("on_min", 1), ("off_min", 1)):
            if key in opts:
                params[key] = self.integer(opts.pop(key), lineno, key, low)
            elif key in ("on_mean", "off_mean"):
                self.fail(lineno, f"exp churn needs {key}")
        return ChurnSpec(ChurnKind.EXP, (), start == "up", **params)

    def load_nodes(self, lines) -> tuple:
        nodes = []
        seen = set()
        for lineno, text in self.content(lines):
            words = text.split()
            node = self.integer(words[0], lineno, "node id")
            if node in seen:
                self.fail(lineno, f"duplicate node id {node}")
            seen.add(node)
            opts = self.pairs(words[1:], lineno)
            role_text = opts.pop("role", "provider")
            try:
                role = Role(role_text)
            except ValueError:
                self.fail(lineno, f"unknown role {role_text!r}")
            churn = self.load_churn(opts, lineno)
            compromised = None
            if "compromised_at" in opts:
                compromised = self.integer(opts.pop("compromised_at"), lineno, "compromised_at")
            slots = self.integer(opts.pop("slots", "1"), lineno, "slots", 1)
            if opts:
                self.fail(lineno, f"unknown node key {sorted(opts)[0]!r}")
            nodes.append(NodeSpec(node, role, churn, compromised, slots))
        if not nodes:
            self.fail(lines[0][0] if lines else 1, "[nodes] is empty")
        return tuple(nodes)

    def load_jobs(self, lines, nodes, programs) -> tuple:
        roles = {n.node: n.role for n in nodes}
        jobs = []
        seen = set()
        for lineno, text in self.content(lines):
            words = text.split()
            job_id = self.integer(words[0], lineno, "job id")
            if job_id in seen:
                self.fail(lineno, f"duplicate job id {job_id}")
            seen.add(job_id)
            opts = self.pairs(words[1:], lineno)
            if "owner" not in opts or "tasks" not in opts:
                self.fail(lineno, "job needs owner= and tasks=")
            owner = self.integer(opts.pop("owner"), lineno, "owner")
            if owner not in roles:
                self.fail(lineno, f"owner {owner} is not a declared node")
            if roles[owner] is Role.PROVIDER:
                self.fail(lineno, f"owner {owner} has role provider; needs user or both")
            submit = self.integer(opts.pop("submit", "0"), lineno, "submit")
            tasks = []
            for item in opts.pop("tasks").split(","):
                m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_-]*):(\d+)", item)
                if not m:
                    self.fail(lineno, f"bad task {item!r}; expected program:duration")
                if m.group(1) not in programs:
                    self.fail(lineno, f"unknown program {m.group(1)!r}")
                duration = int(m.group(2))
                if duration < 1:
                    self.fail(lineno, "task duration must be >= 1")
                tasks.append(TaskSpec(m.group(1), duration))
            if opts:
                self.fail(lineno, f"unknown job key {sorted(opts)[0]!r}")
            jobs.append(JobSpec(job_id, owner, submit, tuple(tasks)))
        return tuple(jobs)


def load_scenario(source: str | Path, text: Optional[str] = None) -> Scenario:
    """Load from a path, or from ``text`` (``source`` then only names it in
    error messages)."""
    if text is None:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError(0, f"cannot read scenario: {exc.strerror}", str(path)) from None
    return _Loader(text, str(source)).load()


def parse_scenario(text: str) -> Scenario:
    return load_scenario("<scenario>", text)


def format_scenario(s: Scenario) -> str:
    lines = ["[sim]", f"seed = {s.seed}", f"horizon = {s.horizon}",
             f"mechanism = {s.mechanism.value}",
             f"dissemination_latency = {s.dissemination_latency}",
             f"dispatch_latency = {s.dispatch_latency}",
             f"notification_latency = {s.notification_latency}",
             f"busy_fraction = {_decimal(s.busy_fraction)}",
             f"retry_budget = {s.retry_budget}", f"cooldown = {s.cooldown}"]
    if s.denylist:
        lines.append("denylist = " + " ".join(str(n) for n in sorted(s.denylist)))
    lines += ["", "[nodes]"]
    for n in s.nodes:
        words = [str(n.node), f"role={n.role.value}", f"churn={n.churn.kind.value}"]
        c = n.churn
        if c.kind is ChurnKind.SCRIPT:
            words.append("events=" + ",".join(
                f"{t}:{'up' if ev is ChurnEvent.CONNECT else 'down'}" for t, ev in c.script))
        elif c.kind is ChurnKind.EXP:
            words += [f"start={'up' if c.start_up else 'down'}", f"on_mean={c.on_mean}",
                      f"off_mean={c.off_mean}", f"on_min={c.on_min}", f"off_min={c.off_min}"]
        if n.compromised_at is not None:
            words.append(f"compromised_at={n.compromised_at}")
        if n.slots != 1:
            words.append(f"slots={n.slots}")
        lines.append(" ".join(words))
    lines += ["", "[policy]", format_policy(s.policy).rstrip("\n")]
    for name in sorted(s.programs):
        lines += ["", f"[program {name}]", format_program(s.programs[name]).rstrip("\n")]
    lines += ["", "[jobs]"]
    for j in s.jobs:
        tasks = ",".join(f"{t.program_name}:{t.duration}" for t in j.tasks)
        lines.append(f"{j.job_id} owner={j.owner} submit={j.submit} tasks={tasks}")
    return "\n".join(lines) + "\n"


def _decimal(value: Fraction) -> str:
    for places in range(0, 12):
        scaled = value * 10 ** places
        if scaled.denominator == 1:
            if places == 0:
                return str(scaled.numerator)
            digits = str(scaled.numerator).rjust(places + 1, "0")
            return f"{digits[:-places]}.{digits[-places:]}"
    raise ValueError(f"{value} has no short decimal form")
