"""Property checks over generated programs, automata and delegation trees."""

import random

from hypothesis import given, settings, strategies as st

from trustgrid.enforcement import (
    AcceptedStatically,
    SecurityAutomaton,
    longest_safe_prefix,
    plan_combined,
    rewrite,
    run_combined,
    run_monitor,
    static_analyze,
)
from trustgrid.federation import Accepted, Capability, Coordinator, InvalidReason
from trustgrid.generators import random_delegation_tree
from trustgrid.guest import (
    Branch,
    Compute,
    GuestEvent,
    GuestProgram,
    Halt,
    Read,
    Send,
    Write,
    branch_count,
    enumerate_paths,
    execute_unmonitored,
    format_program,
    instruction_count,
    parse_program,
)
from trustgrid.scenario import ChurnKind, ChurnSpec, churn_process

simple = st.one_of(
    st.builds(Read, st.integers(0, 15)),
    st.builds(Write, st.integers(0, 15)),
    st.builds(Compute, st.integers(1, 50)),
    st.builds(Send, st.integers(0, 99)),
    st.just(Halt()),
)


def _blocks(children):
    block = st.lists(children, max_size=4).map(tuple)
    return st.builds(Branch, st.integers(0, 13), block, block)


instruction = st.recursive(simple, _blocks, max_leaves=12)
programs = (
    st.lists(instruction, max_size=8)
    .map(lambda body: GuestProgram(tuple(body)))
    .filter(lambda p: branch_count(p.body) <= 4 and instruction_count(p.body) <= 30)
)
straight_line = st.lists(simple, max_size=30).map(lambda body: GuestProgram(tuple(body)))


@st.composite
def automata(draw):
    n = draw(st.integers(1, 5))
    states = tuple(f"Q{i}" for i in range(n))
    delta = {}
    for s in states:
        for ev in GuestEvent:
            target = draw(st.one_of(st.none(), st.sampled_from(states)))
            if target is not None:
                delta[(s, ev)] = target
    return SecurityAutomaton("gen", states, states[0], delta)


oracles = st.lists(st.booleans(), min_size=4, max_size=4)


def automaton_accepts(a, events):
    state = a.initial
    for ev in events:
        if (state, ev) not in a.delta:
            return False
        state = a.delta[(state, ev)]
    return True


@given(programs)
def test_print_parse_identity(p):
    assert parse_program(format_program(p)) == p


@given(programs, oracles)
def test_realized_trace_is_an_enumerated_path(p, oracle):
    assert execute_unmonitored(p, oracle) in enumerate_paths(p)


@given(automata(), programs, oracles)
def test_monitor_matches_prefix_oracle(a, p, oracle):
    raw = execute_unmonitored(p, oracle).events
    k = longest_safe_prefix(a, raw)
    assert run_monitor(a, p, oracle).trace.events == raw[:k]


@given(automata(), programs, oracles)
def test_rewriter_sound_and_transparent(a, p, oracle):
    raw = execute_unmonitored(p, oracle).events
    out = execute_unmonitored(rewrite(a, p).program, oracle).events
    assert automaton_accepts(a, out)
    assert out == raw[: longest_safe_prefix(a, raw)]


@given(automata(), programs)
def test_static_acceptance_is_sound(a, p):
    if isinstance(static_analyze(a, p), AcceptedStatically):
        assert all(automaton_accepts(a, t.events) for t in enumerate_paths(p))


@given(automata(), straight_line)
def test_static_complete_on_straight_line(a, p):
    accepted = isinstance(static_analyze(a, p), AcceptedStatically)
    assert accepted == automaton_accepts(a, execute_unmonitored(p, []).events)


@given(automata(), programs, oracles)
def test_combined_matches_monitor(a, p, oracle):
    combined = run_combined(a, p, oracle)
    monitored = run_monitor(a, p, oracle)
    assert combined.trace.events == monitored.trace.events
    assert getattr(combined, "violation_index", None) == getattr(monitored, "violation_index", None)
    plan = plan_combined(a, p)
    if isinstance(static_analyze(a, p), AcceptedStatically):
        assert plan.guard_count == 0


@settings(max_examples=40)
@given(st.integers(0, 2**32))
def test_delegation_tree_properties(seed):
    rng = random.Random(seed)
    tree = random_delegation_tree(rng)
    coord = tree.coordinator
    for tid, parent in tree.parent.items():
        if parent is not None:
            assert tree.tokens[tid].caps <= tree.tokens[parent].caps
            assert tree.tokens[tid].depth == tree.tokens[parent].depth + 1
    victim = rng.choice(sorted(tree.tokens))
    expected = tree.descendants(victim)
    assert coord.revoke(victim) == expected
    for tid, token in tree.tokens.items():
        assert coord.validate_chain(token).valid == (tid not in expected)


@settings(max_examples=40)
@given(st.integers(0, 2**32), st.data())
def test_any_byte_mutation_breaks_the_tag(seed, data):
    tree = random_delegation_tree(random.Random(seed), max_tokens=10)
    token = data.draw(st.sampled_from(sorted(tree.tokens.values(), key=lambda t: t.token_id)))
    blob = bytearray(token.to_bytes())
    i = data.draw(st.integers(0, len(blob) - 1))
    blob[i] ^= data.draw(st.integers(1, 255))
    assert tree.coordinator.validate_serialized(bytes(blob)).reason is InvalidReason.BAD_TAG


@settings(max_examples=30)
@given(st.lists(st.tuples(st.sampled_from(["sub", "drop", "revoke"]), st.integers(1, 6)), max_size=40))
def test_epochs_step_by_one_and_revocations_only_grow(ops):
    coord = Coordinator(b"e" * 16)
    seen = [coord.epoch]
    coord.add_epoch_listener(seen.append)
    for op, node in ops:
        if op == "sub" and node not in coord.epoch.membership:
            decision = coord.subscribe(node, {Capability.COMPUTE})
            assert isinstance(decision, Accepted)
        elif op == "drop" and node in coord.epoch.membership:
            coord.disconnect(node)
        elif op == "revoke":
            main = coord.main_token(node)
            if main is not None:
                coord.revoke(main.token_id)
    for before, after in zip(seen, seen[1:]):
        assert after.version == before.version + 1
        assert before.revoked <= after.revoked
        changed = (before.membership != after.membership) or (before.revoked != after.revoked)
        assert changed


@given(st.integers(0, 2**63), st.integers(1, 60), st.integers(1, 60), st.booleans())
def test_churn_is_deterministic_and_alternating(seed, on_mean, off_mean, start_up):
    spec = ChurnSpec(ChurnKind.EXP, start_up=start_up, on_mean=on_mean, off_mean=off_mean)
    events = churn_process(spec, seed, 2000)
    assert events == churn_process(spec, seed, 2000)
    assert all(a[0] < b[0] for a, b in zip(events, events[1:]))
    assert all(a[1] is not b[1] for a, b in zip(events, events[1:]))
