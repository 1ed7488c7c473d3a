import pytest

from trustgrid.agents import (
    AgentState,
    AgentStatus,
    AgentRuntime,
    DestroyCause,
    GiveUp,
    GiveUpReason,
    Mission,
    NotificationKind,
    OutcomeKind,
    Reassignment,
    ResultAccepted,
    TaskRecord,
)
from trustgrid.enforcement import Mechanism, SecurityAutomaton
from trustgrid.errors import (
    AttenuationViolation,
    IllegalTransition,
    NotMyChild,
    ParentDestroyed,
    RejectedSubscription,
)
from trustgrid.federation import (
    ALL_CAPABILITIES,
    AdmissionRule,
    Capability as C,
    Coordinator,
    Credential,
    Rejected,
    RejectReason,
)
from trustgrid.guest import GuestEvent as E, parse_program


class World:
    """Coordinator, runtime, one active owner (node 1) and providers 3, 7, 9."""

    def __init__(self, owner_caps=ALL_CAPABILITIES, retry_budget=8):
        self.coord = Coordinator(b"k" * 16)
        self.rt = AgentRuntime(self.coord, retry_budget=retry_budget)
        self.owner = self.rt.spawn_main(self.coord.subscribe(1, owner_caps))
        self.rt.activate_main(self.owner, 1)
        for node in (3, 7, 9):
            self.coord.subscribe(node, ALL_CAPABILITIES)

    def task(self, source="compute 1\nread 0", task_id=1):
        self.rt.tasks[task_id] = TaskRecord(task_id, parse_program(source), 10)
        return task_id

    def mission(self, task=1, target=3):
        return self.rt.new_mission(task, target, 0, 100)


@pytest.fixture
def world():
    return World()


class TestSpawnMain:
    def test_accepted(self, world):
        coord = world.coord
        agent = world.rt.spawn_main(coord.subscribe(20, {C.COMPUTE}))
        assert agent.state == AgentState(AgentStatus.INSTANTIATED)
        assert agent.token.depth == 0 and agent.is_main

    def test_rejected(self, world):
        with pytest.raises(RejectedSubscription):
            world.rt.spawn_main(Rejected(RejectReason.DENYLISTED))

    def test_denylisted_subscription_cannot_spawn(self, world):
        decision = world.coord.subscribe(20, {C.COMPUTE}, AdmissionRule(denylist=frozenset({20})))
        with pytest.raises(RejectedSubscription):
            world.rt.spawn_main(decision)

    def test_independent_mains(self, world):
        a = world.rt.spawn_main(world.coord.subscribe(20, {C.COMPUTE}))
        b = world.rt.spawn_main(world.coord.subscribe(21, {C.COMPUTE}))
        assert a.token_id != b.token_id


class TestSpawnSecondary:
    def test_minimal_inheritance(self):
        w = World(owner_caps={C.COMPUTE, C.SEND_MESSAGE})
        w.task("compute 2")
        child = w.rt.spawn_secondary(w.owner, w.mission())
        assert child.token.caps == {C.COMPUTE}
        assert child.state.status is AgentStatus.INSTANTIATED
        assert child.token.parent == w.owner.token_id

    def test_attenuation(self):
        w = World(owner_caps={C.COMPUTE, C.SEND_MESSAGE})
        w.task("write 1")
        with pytest.raises(AttenuationViolation):
            w.rt.spawn_secondary(w.owner, w.mission())

    def test_parent_destroyed(self, world):
        world.task()
        world.rt.destroy_silently(world.owner, DestroyCause.DISCONNECT, 0)
        with pytest.raises(ParentDestroyed):
            world.rt.spawn_secondary(world.owner, world.mission())

    def test_mission_caps_must_match_program(self, world):
        with pytest.raises(ValueError):
            Mission(1, 1, parse_program("read 0"), 3, frozenset({C.COMPUTE}), 10)


class TestStateMachine:
    def test_no_exit_from_completed(self, world):
        world.task("compute 1")
        child = world.rt.spawn_secondary(world.owner, world.mission())
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, _allow(), world.coord.credentials[3])
        assert outcome.kind is OutcomeKind.COMPLETED
        with pytest.raises(IllegalTransition):
            world.rt.transition(child, AgentState(AgentStatus.ACTIVE, 3), 1)

    def test_destruction_requires_notification(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        with pytest.raises(IllegalTransition):
            world.rt.transition(child, AgentState(AgentStatus.DESTROYED, cause=DestroyCause.MISSION_END), 0)

    def test_instantiated_may_be_revoked_before_departure(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        world.rt.destroy_silently(child, DestroyCause.PARENT_REVOKED, 0)
        assert str(child.state) == "Destroyed(ParentRevoked)"

    def test_disconnect_only_for_mains(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        with pytest.raises(ValueError):
            world.rt.destroy_silently(child, DestroyCause.DISCONNECT, 0)

    def test_live_descendants(self, world):
        world.task()
        a = world.rt.spawn_secondary(world.owner, world.mission())
        b = world.rt.spawn_secondary(world.owner, world.mission(target=7))
        assert [x.token_id for x in world.rt.live_descendants(world.owner)] == [a.token_id, b.token_id]


def _allow():
    return SecurityAutomaton("allow", ("S",), "S", {("S", e): "S" for e in E})


class TestMigrateAndExecute:
    def test_honest_host(self, world):
        world.task("compute 1\nread 0")
        child = world.rt.spawn_secondary(world.owner, world.mission())
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, _allow(), world.coord.credentials[3])
        assert outcome.kind is OutcomeKind.COMPLETED
        assert outcome.committed == (E.COMPUTE, E.READ)
        assert outcome.notification.kind is NotificationKind.MISSION_COMPLETE
        assert outcome.notification.to == world.owner.token_id
        assert child.state.status is AgentStatus.COMPLETED
        assert world.coord.validate_chain(child.token)
        states = [d["state"] for _, kind, d in world.rt.log if kind == "agent" and d["token"] == child.token_id]
        assert states == ["Migrating(3)", "Active(3)", "Completed"]

    def test_compromised_host(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        genuine = world.coord.credentials[3]
        forged = Credential(3, bytes(16), genuine.issued_epoch)
        outcome = world.rt.migrate_and_execute(child, None, Mechanism.MONITOR, _allow(), forged)
        assert outcome.kind is OutcomeKind.HANDSHAKE_FAILED
        assert outcome.notification.kind is NotificationKind.COMPROMISED
        assert child.state == AgentState(AgentStatus.DESTROYED, cause=DestroyCause.COMPROMISE)
        assert child.notifications_sent == 1
        kinds = [kind for _, kind, d in world.rt.log if d.get("token") == child.token_id]
        assert kinds.index("notify") < len(kinds) - 1 and kinds[-1] == "agent"

    def test_host_vanishes_mid_execution(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        world.rt.begin_migration(child, 0)
        assert world.rt.arrive(child, world.coord.credentials[3], 1) is None
        world.rt.execute(child, _allow(), Mechanism.MONITOR, [])
        outcome = world.rt.vanish(child, 5)
        assert outcome.kind is OutcomeKind.HOST_VANISHED
        assert outcome.notification.kind is NotificationKind.HOST_UNREACHABLE
        assert child.state.status is AgentStatus.DESTROYED

    def test_policy_violation_still_completes(self, world, nsar):
        world.task("read 0\nsend 2", task_id=1)
        child = world.rt.spawn_secondary(world.owner, world.mission())
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, nsar, world.coord.credentials[3])
        assert outcome.kind is OutcomeKind.TRUNCATED
        assert outcome.violation_index == 1
        assert outcome.notification.kind is NotificationKind.POLICY_VIOLATION
        assert child.state.status is AgentStatus.COMPLETED

    def test_revoked_agent_destroyed_silently(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        world.coord.revoke(child.token_id)
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, _allow(), world.coord.credentials[3])
        assert outcome.notification is None
        assert child.state.cause is DestroyCause.PARENT_REVOKED
        assert child.notifications_sent == 0

    def test_host_left_federation(self, world):
        world.task()
        child = world.rt.spawn_secondary(world.owner, world.mission())
        cred = world.coord.credentials[3]
        world.coord.disconnect(3)
        outcome = world.rt.migrate_and_execute(child, None, Mechanism.MONITOR, _allow(), cred)
        assert outcome.notification.kind is NotificationKind.HANDSHAKE_FAILED

    def test_missing_capability_refused_before_first_event(self, world):
        world.task("read 0")
        child = world.rt.spawn_secondary(world.owner, world.mission())
        weaker = world.coord.issue_delegate(child.token, child.mission.mission_id, frozenset())
        child.token = weaker  # simulate a host handing over an under-privileged token
        world.rt.begin_migration(child, 0)
        world.rt.arrive(child, world.coord.credentials[3], 0)
        before = len(world.rt.committed)
        with pytest.raises(IllegalTransition):
            world.rt.execute(child, _allow(), Mechanism.MONITOR, [])
        assert len(world.rt.committed) == before


def _fail_on(world, child, kind=NotificationKind.HOST_UNREACHABLE, now=0):
    world.rt.begin_migration(child, now)
    world.rt.arrive(child, world.coord.credentials[child.mission.target], now)
    return world.rt.self_destruct(child, kind, DestroyCause.MISSION_END, now)


class TestHandleNotification:
    def test_lowest_remaining(self, world):
        world.task()
        child = world.rt.dispatch(world.owner, 1, 7, 0, 100)
        note = _fail_on(world, child)
        result = world.rt.handle_notification(world.owner, note, {3, 7, 9})
        assert isinstance(result, Reassignment)
        assert result.mission.target == 3
        assert result.agent.state.status is AgentStatus.INSTANTIATED
        assert not world.coord.validate_chain(child.token)

    def test_nothing_eligible(self, world):
        world.task()
        child = world.rt.dispatch(world.owner, 1, 7, 0, 100)
        note = _fail_on(world, child)
        assert world.rt.handle_notification(world.owner, note, set()) == GiveUp(1, GiveUpReason.TASKS_PENDING)

    def test_three_failures_on_distinct_nodes(self):
        w = World(retry_budget=5)
        w.task()
        child = w.rt.dispatch(w.owner, 1, 3, 0, 100)
        targets = []
        for _ in range(3):
            note = _fail_on(w, child)
            result = w.rt.handle_notification(w.owner, note, {3, 7, 9, 11})
            assert isinstance(result, Reassignment)
            targets.append(result.mission.target)
            child = result.agent
        assert targets == [7, 9, 11]
        assert w.rt.tasks[1].attempts == 4

    def test_budget_exhausted(self):
        w = World(retry_budget=1)
        w.task()
        child = w.rt.dispatch(w.owner, 1, 3, 0, 100)
        result = w.rt.handle_notification(w.owner, _fail_on(w, child), {3, 7, 9})
        child = result.agent
        result = w.rt.handle_notification(w.owner, _fail_on(w, child), {3, 7, 9})
        assert result == GiveUp(1, GiveUpReason.BUDGET_EXHAUSTED)
        assert w.rt.tasks[1].abandoned

    def test_compromised_host_becomes_suspect(self, world):
        world.task(task_id=1)
        world.task(task_id=2)
        child = world.rt.dispatch(world.owner, 1, 3, 0, 100)
        world.rt.handle_notification(world.owner, _fail_on(world, child, NotificationKind.COMPROMISED), {3, 7})
        assert 3 in world.rt.excluded_for(2, 1000)

    def test_cooldown_expires(self, world):
        world.task()
        child = world.rt.dispatch(world.owner, 1, 3, 0, 100)
        world.rt.handle_notification(world.owner, _fail_on(world, child), {3, 7}, now=5)
        assert 3 in world.rt.excluded_for(1, 14)
        assert 3 not in world.rt.excluded_for(1, 15)

    def test_result_accepted(self, world):
        world.task("compute 1")
        child = world.rt.dispatch(world.owner, 1, 3, 0, 100)
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, _allow(), world.coord.credentials[3])
        result = world.rt.handle_notification(world.owner, outcome.notification, {3})
        assert isinstance(result, ResultAccepted)
        assert result.validation.valid and not result.truncated
        assert world.rt.tasks[1].done
        # mission end revokes the secondary
        assert not world.coord.validate_chain(child.token)

    def test_result_with_revoked_chain_is_rejected(self, world):
        world.task("compute 1")
        child = world.rt.dispatch(world.owner, 1, 3, 0, 100)
        outcome = world.rt.migrate_and_execute(
            child, None, Mechanism.MONITOR, _allow(), world.coord.credentials[3])
        world.coord.revoke(child.token_id)
        result = world.rt.handle_notification(world.owner, outcome.notification, {3})
        assert result == GiveUp(1, GiveUpReason.INVALID_RESULT)
        assert not world.rt.tasks[1].done

    def test_not_my_child(self, world):
        world.task()
        child = world.rt.dispatch(world.owner, 1, 3, 0, 100)
        note = _fail_on(world, child)
        stranger = world.rt.spawn_main(world.coord.subscribe(50, ALL_CAPABILITIES))
        with pytest.raises(NotMyChild):
            world.rt.handle_notification(stranger, note, {3})
