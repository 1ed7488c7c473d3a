"""Seeded random inputs for property checks and the acceptance suite."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

from trustgrid.enforcement import Mechanism, SecurityAutomaton
from trustgrid.federation import ALL_CAPABILITIES, Accepted, CapabilityToken, Coordinator
from trustgrid.guest import (
    STATE_REGISTER,
    Branch,
    Compute,
    GuestEvent,
    GuestProgram,
    Halt,
    Read,
    Send,
    Write,
)
from trustgrid.scenario import (
    DEFAULT_BUSY_FRACTION,
    ChurnKind,
    ChurnSpec,
    JobSpec,
    NodeSpec,
    Role,
    Scenario,
    TaskSpec,
)

EVENTS = tuple(GuestEvent)


def random_program(rng: random.Random, max_instructions: int = 30, max_branches: int = 4,
                   allow_branches: bool = True) -> GuestProgram:
    budget = [rng.randint(1, max_instructions), max_branches if allow_branches else 0]

    def simple():
        kind = rng.randrange(4)
        if kind == 0:
            return Read(rng.randrange(4))
        if kind == 1:
            return Write(rng.randrange(4))
        if kind == 2:
            return Compute(rng.randint(1, 9))
        return Send(rng.randrange(4))

    def block(depth: int) -> tuple:
        out = []
        while budget[0] > 0 and rng.random() < 0.85:
            budget[0] -= 1
            roll = rng.random()
            if budget[1] > 0 and depth < 3 and budget[0] > 0 and roll < 0.2:
                budget[1] -= 1
                out.append(Branch(rng.randrange(STATE_REGISTER), block(depth + 1), block(depth + 1)))
            elif roll > 0.97:
                out.append(Halt())
            else:
                out.append(simple())
        return tuple(out)

    return GuestProgram(block(0))


def random_automaton(rng: random.Random, max_states: int = 5, density: float = 0.7) -> SecurityAutomaton:
    """A partial automaton: each (state, event) pair is defined with
    probability ``density``; undefined pairs are violations."""
    states = tuple(f"S{i}" for i in range(rng.randint(1, max_states)))
    delta = {
        (s, ev): rng.choice(states)
        for s in states for ev in EVENTS
        if rng.random() < density
    }
    return SecurityAutomaton(f"rand{rng.randrange(10**6)}", states, states[0], delta)


@dataclass
class DelegationTree:
    coordinator: Coordinator
    root: CapabilityToken
    tokens: dict = field(default_factory=dict)  # token id -> token
    parent: dict = field(default_factory=dict)  # token id -> parent id (None for the root)

    def descendants(self, token_id: int) -> set:
        """Independent of the coordinator: walk the recorded parent links."""
        out = {token_id}
        changed = True
        while changed:
            changed = False
            for child, par in self.parent.items():
                if par in out and child not in out:
                    out.add(child)
                    changed = True
        return out


def random_delegation_tree(rng: random.Random, max_depth: int = 6, max_branching: int = 4,
                           max_tokens: int = 80) -> DelegationTree:
    coordinator = Coordinator(rng.randbytes(16))
    caps = frozenset(c for c in ALL_CAPABILITIES if rng.random() < 0.8) or frozenset(ALL_CAPABILITIES)
    decision = coordinator.subscribe(1, caps)
    assert isinstance(decision, Accepted)
    root = decision.token
    tree = DelegationTree(coordinator, root, {root.token_id: root}, {root.token_id: None})
    frontier = [root]
    mission = 1
    while frontier and len(tree.tokens) < max_tokens:
        parent = frontier.pop(0)
        if parent.depth >= max_depth:
            continue
        for _ in range(rng.randint(0, max_branching)):
            if len(tree.tokens) >= max_tokens:
                break
            sub = frozenset(c for c in parent.caps if rng.random() < 0.7)
            child = coordinator.issue_delegate(parent, mission, sub)
            mission += 1
            tree.tokens[child.token_id] = child
            tree.parent[child.token_id] = parent.token_id
            frontier.append(child)
    return tree


def random_program_library(rng: random.Random, count: int = 6) -> dict:
    return {f"p{i}": random_program(rng, max_instructions=12, max_branches=2) for i in range(count)}


def churn_scenario(
    seed: int,
    providers: int = 20,
    jobs: int = 50,
    tasks_per_job: int = 4,
    max_duration: int = 20,
    compromised_share: Fraction = Fraction(0),
    mechanism: Mechanism = Mechanism.MONITOR,
    busy_fraction: Fraction = DEFAULT_BUSY_FRACTION,
    horizon: int = 6000,
    late_compromise: bool = False,
) -> Scenario:
    """Provider churn with on-intervals of at least twice the longest
    effective task time (slowdown, travel and notification included), so an
    attempt that starts early in an on-interval always finishes.

    Compromised nodes turn hostile at time 0, or with ``late_compromise``
    half of them at a random later time."""
    rng = random.Random(f"scenario:{seed}")
    longest = -(-max_duration * busy_fraction.denominator // (busy_fraction.denominator - busy_fraction.numerator))
    on_min = 2 * (longest + 2)
    compromised = set(rng.sample(range(1, providers + 1), int(providers * compromised_share)))
    nodes = []
    for node in range(1, providers + 1):
        churn = ChurnSpec(ChurnKind.EXP, start_up=rng.random() < 0.8, on_mean=3 * on_min,
                          off_mean=on_min, on_min=on_min, off_min=1)
        at = None
        if node in compromised:
            at = rng.randint(1, horizon // 4) if late_compromise and rng.random() < 0.5 else 0
        nodes.append(NodeSpec(node, Role.PROVIDER, churn, at))
    owner = providers + 1
    nodes.append(NodeSpec(owner, Role.USER))

    programs = random_program_library(rng)
    names = sorted(programs)
    job_specs = tuple(
        JobSpec(j, owner, rng.randint(0, horizon // 10), tuple(
            TaskSpec(rng.choice(names), rng.randint(1, max_duration)) for _ in range(tasks_per_job)))
        for j in range(1, jobs + 1)
    )
    return Scenario(
        seed=seed,
        horizon=horizon,
        nodes=tuple(nodes),
        jobs=job_specs,
        policy=random_automaton(rng, density=0.8),
        programs=programs,
        mechanism=mechanism,
        busy_fraction=busy_fraction,
    )
