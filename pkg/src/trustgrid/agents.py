"""Mobile-agent lifecycle: main and secondary instances, migration to a host,
mission execution under an enforcement mechanism, self-destruction with
parent notification, and the parent's reassignment decision.

An agent is a capability token plus a host-side state machine::

    Instantiated -> Migrating(to) -> Active(on) -> Completed
         |               |              |
         +---------------+--------------+--> Destroyed(cause)
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from trustgrid.enforcement import Enforced, Mechanism, SecurityAutomaton, enforce
from trustgrid.errors import (
    IllegalTransition,
    NotMyChild,
    ParentDestroyed,
    RejectedSubscription,
)
from trustgrid.federation import (
    Accepted,
    CapabilityToken,
    Coordinator,
    Credential,
    HandshakeFailure,
    InvalidReason,
    MissionId,
    NodeId,
    PolicyEpoch,
    Side,
    SubscriptionDecision,
    TokenId,
    Validation,
    format_caps,
    select_provider,
)
from trustgrid.guest import GuestProgram, required_caps

logger = logging.getLogger(__name__)

DEFAULT_RETRY_BUDGET = 8
DEFAULT_COOLDOWN = 10

TaskId = int


class AgentStatus(Enum):
    INSTANTIATED = "Instantiated"
    MIGRATING = "Migrating"
    ACTIVE = "Active"
    COMPLETED = "Completed"
    DESTROYED = "Destroyed"


class DestroyCause(Enum):
    DISCONNECT = "Disconnect"
    MISSION_END = "MissionEnd"
    COMPROMISE = "Compromise"
    PARENT_REVOKED = "ParentRevoked"
    HOSTILE = "Hostile"


_LEGAL = {
    AgentStatus.INSTANTIATED: {AgentStatus.MIGRATING, AgentStatus.DESTROYED},
    AgentStatus.MIGRATING: {AgentStatus.ACTIVE, AgentStatus.DESTROYED},
    AgentStatus.ACTIVE: {AgentStatus.COMPLETED, AgentStatus.DESTROYED},
    AgentStatus.COMPLETED: set(),
    AgentStatus.DESTROYED: set(),
}


@dataclass(frozen=True)
class AgentState:
    status: AgentStatus
    node: Optional[NodeId] = None
    cause: Optional[DestroyCause] = None

    @property
    def terminal(self) -> bool:
        return self.status in (AgentStatus.COMPLETED, AgentStatus.DESTROYED)

    def __str__(self) -> str:
        if self.status in (AgentStatus.MIGRATING, AgentStatus.ACTIVE):
            return f"{self.status.value}({self.node})"
        if self.status is AgentStatus.DESTROYED:
            return f"Destroyed({self.cause.value})"
        return self.status.value


class NotificationKind(Enum):
    HOST_UNREACHABLE = "HostUnreachable"
    HANDSHAKE_FAILED = "HandshakeFailed"
    COMPROMISED = "Compromised"
    POLICY_VIOLATION = "PolicyViolation"
    MISSION_COMPLETE = "MissionComplete"

    @property
    def is_failure(self) -> bool:
        return self in _FAILURES


_FAILURES = {
    NotificationKind.HOST_UNREACHABLE,
    NotificationKind.HANDSHAKE_FAILED,
    NotificationKind.COMPROMISED,
}


@dataclass(frozen=True)
class Mission:
    mission_id: MissionId
    task: TaskId
    program: GuestProgram
    target: NodeId
    required_caps: frozenset
    deadline: int
    created: int = 0

    def __post_init__(self):
        if self.required_caps != required_caps(self.program):
            raise ValueError("mission caps must equal the program's required caps")
        if self.deadline <= self.created:
            raise ValueError("mission deadline must be after its creation")


@dataclass(frozen=True)
class Notification:
    sender: TokenId
    to: TokenId
    kind: NotificationKind
    at: int
    mission: MissionId
    host: NodeId
    digest: Optional[str] = None


@dataclass
class AgentInstance:
    token: CapabilityToken
    state: AgentState
    mission: Optional[Mission] = None
    notifications_sent: int = 0
    exec_started: Optional[int] = None

    @property
    def token_id(self) -> TokenId:
        return self.token.token_id

    @property
    def is_main(self) -> bool:
        return self.token.is_main

    @property
    def live(self) -> bool:
        return not self.state.terminal


class OutcomeKind(Enum):
    COMPLETED = "Completed"
    TRUNCATED = "Truncated"
    HANDSHAKE_FAILED = "HandshakeFailed"
    HOST_VANISHED = "HostVanished"


@dataclass(frozen=True)
class MissionOutcome:
    kind: OutcomeKind
    notification: Optional[Notification]
    committed: tuple = ()
    digest: Optional[str] = None
    violation_index: Optional[int] = None
    failure: Optional[HandshakeFailure] = None


@dataclass
class TaskRecord:
    task_id: TaskId
    program: GuestProgram
    duration: int
    oracle: tuple = ()
    attempts: int = 0
    failed_at: dict = field(default_factory=dict)
    done: bool = False
    abandoned: bool = False
    result: Optional[str] = None


class GiveUpReason(Enum):
    TASKS_PENDING = "TasksPending"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    OWNER_DISCONNECTED = "OwnerDisconnected"
    INVALID_RESULT = "InvalidResult"
    HORIZON = "HorizonReached"


@dataclass(frozen=True)
class Reassignment:
    mission: Mission
    agent: AgentInstance


@dataclass(frozen=True)
class GiveUp:
    task: TaskId
    reason: GiveUpReason


@dataclass(frozen=True)
class ResultAccepted:
    task: TaskId
    digest: str
    host: NodeId
    validation: Validation
    truncated: bool


def result_digest(task: TaskId, events: Iterable) -> str:
    text = f"{task}:" + ",".join(str(e) for e in events)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class AgentRuntime:
    """Owns every agent state machine. Stepped by a single caller (the
    simulator's event loop); ``emit`` receives one record per lifecycle
    transition as ``(time, kind, details)``."""

    def __init__(
        self,
        coordinator: Coordinator,
        retry_budget: int = DEFAULT_RETRY_BUDGET,
        cooldown: int = DEFAULT_COOLDOWN,
        emit: Optional[Callable[[int, str, dict], None]] = None,
    ):
        self.coordinator = coordinator
        self.retry_budget = retry_budget
        self.cooldown = cooldown
        self.agents: dict[TokenId, AgentInstance] = {}
        self.tasks: dict[TaskId, TaskRecord] = {}
        self.suspects: set[NodeId] = set()
        self.committed: list = []  # (host, mission_id, events)
        self.log: list = []
        self._emit = emit
        self._next_mission = 1

    def record(self, now: int, kind: str, **details) -> None:
        self.log.append((now, kind, details))
        if self._emit is not None:
            self._emit(now, kind, details)

    # -- state machine -------------------------------------------------------

    def transition(self, agent: AgentInstance, new: AgentState, now: int) -> None:
        old = agent.state
        if new.status not in _LEGAL[old.status]:
            raise IllegalTransition(f"agent {agent.token_id}: {old} -> {new}")
        if new.status is AgentStatus.DESTROYED:
            silent = new.cause in (DestroyCause.PARENT_REVOKED, DestroyCause.DISCONNECT)
            if not silent and agent.notifications_sent != 1:
                raise IllegalTransition(f"agent {agent.token_id} destroyed without notifying its parent")
        agent.state = new
        self.record(now, "agent", token=agent.token_id, state=str(new), prev=str(old))

    def spawn_main(self, decision: SubscriptionDecision, now: int = 0) -> AgentInstance:
        if not isinstance(decision, Accepted):
            raise RejectedSubscription(decision.reason.value)
        token = decision.token
        agent = AgentInstance(token, AgentState(AgentStatus.INSTANTIATED))
        self.agents[token.token_id] = agent
        self.record(now, "spawn", token=token.token_id, depth=0, node=token.subject,
                    caps=format_caps(token.caps))
        return agent

    def activate_main(self, agent: AgentInstance, node: NodeId, now: int = 0) -> None:
        """Main instances travel from the coordinator to their own node."""
        self.transition(agent, AgentState(AgentStatus.MIGRATING, node), now)
        self.transition(agent, AgentState(AgentStatus.ACTIVE, node), now)

    def new_mission(self, task: TaskId, target: NodeId, now: int, deadline: int) -> Mission:
        record = self.tasks[task]
        mission = Mission(self._next_mission, task, record.program, target,
                          required_caps(record.program), deadline, now)
        self._next_mission += 1
        return mission

    def spawn_secondary(self, parent: AgentInstance, mission: Mission, now: int = 0) -> AgentInstance:
        if parent.state.terminal:
            raise ParentDestroyed(f"parent {parent.token_id} is {parent.state}")
        if parent.state.status is AgentStatus.MIGRATING:
            raise IllegalTransition(f"parent {parent.token_id} is migrating")
        token = self.coordinator.issue_delegate(parent.token, mission.mission_id, mission.required_caps)
        agent = AgentInstance(token, AgentState(AgentStatus.INSTANTIATED), mission)
        self.agents[token.token_id] = agent
        self.record(now, "spawn", token=token.token_id, parent=parent.token_id, depth=token.depth,
                    mission=mission.mission_id, task=mission.task, target=mission.target,
                    caps=format_caps(token.caps))
        return agent

    def parent_of(self, agent: AgentInstance) -> Optional[AgentInstance]:
        if agent.token.parent is None:
            return None
        return self.agents.get(agent.token.parent)

    def live_descendants(self, agent: AgentInstance) -> list:
        ids = self.coordinator.subtree(agent.token_id) - {agent.token_id}
        return [self.agents[t] for t in sorted(ids) if t in self.agents and self.agents[t].live]

    # -- self-destruction ----------------------------------------------------

    def notify(self, agent: AgentInstance, kind: NotificationKind, now: int,
               digest: Optional[str] = None) -> Notification:
        if agent.token.parent is None:
            raise IllegalTransition("main instances have no parent to notify")
        note = Notification(agent.token_id, agent.token.parent, kind, now,
                            agent.mission.mission_id, agent.mission.target, digest)
        agent.notifications_sent += 1
        self.record(now, "notify", token=agent.token_id, to=note.to, note=kind.value,
                    mission=note.mission, host=note.host, **({"digest": digest} if digest else {}))
        return note

    def self_destruct(self, agent: AgentInstance, kind: NotificationKind, cause: DestroyCause,
                      now: int) -> Notification:
        note = self.notify(agent, kind, now)
        self.transition(agent, AgentState(AgentStatus.DESTROYED, cause=cause), now)
        return note

    def destroy_silently(self, agent: AgentInstance, cause: DestroyCause, now: int) -> None:
        """Destruction that needs no notification: a main instance whose node
        disconnected, or any instance whose ancestor was revoked."""
        if cause not in (DestroyCause.DISCONNECT, DestroyCause.PARENT_REVOKED):
            raise ValueError(f"{cause.value} requires a notification")
        if cause is DestroyCause.DISCONNECT and not agent.is_main:
            raise ValueError("only main instances are destroyed by disconnect")
        self.transition(agent, AgentState(AgentStatus.DESTROYED, cause=cause), now)

    # -- mission flow --------------------------------------------------------

    def begin_migration(self, agent: AgentInstance, now: int) -> None:
        self.transition(agent, AgentState(AgentStatus.MIGRATING, agent.mission.target), now)

    def arrive(self, agent: AgentInstance, host_credential: Credential, now: int,
               epoch: Optional[PolicyEpoch] = None) -> Optional[MissionOutcome]:
        """Mutual authentication at the target host. Returns None when the agent
        is now Active, otherwise the failure outcome."""
        result = self.coordinator.handshake(agent.token, host_credential, epoch)
        if not isinstance(result, HandshakeFailure):
            self.transition(agent, AgentState(AgentStatus.ACTIVE, agent.mission.target), now)
            agent.exec_started = now
            return None
        self.record(now, "handshake_failed", token=agent.token_id, side=result.side.value,
                    reason=result.reason.value, host=agent.mission.target)
        if result.side is Side.AGENT and result.reason is InvalidReason.REVOKED:
            self.destroy_silently(agent, DestroyCause.PARENT_REVOKED, now)
            return MissionOutcome(OutcomeKind.HANDSHAKE_FAILED, None, failure=result)
        if result.reason is InvalidReason.SUBJECT_NOT_MEMBER:
            note = self.self_destruct(agent, NotificationKind.HANDSHAKE_FAILED, DestroyCause.MISSION_END, now)
        else:
            note = self.self_destruct(agent, NotificationKind.COMPROMISED, DestroyCause.COMPROMISE, now)
        return MissionOutcome(OutcomeKind.HANDSHAKE_FAILED, note, failure=result)

    def execute(self, agent: AgentInstance, automaton: SecurityAutomaton, mechanism: Mechanism,
                oracle: Iterable[bool]) -> Enforced:
        if agent.state.status is not AgentStatus.ACTIVE:
            raise IllegalTransition(f"agent {agent.token_id} is not active")
        missing = required_caps(agent.mission.program) - agent.token.caps
        if missing:
            # refused before the first event
            raise IllegalTransition(f"token lacks {format_caps(missing)}")
        enforced = enforce(automaton, agent.mission.program, oracle, mechanism)
        self.committed.append((agent.state.node, agent.mission.mission_id, enforced.committed))
        return enforced

    def finish(self, agent: AgentInstance, enforced: Enforced, now: int) -> MissionOutcome:
        digest = result_digest(agent.mission.task, enforced.committed)
        self.transition(agent, AgentState(AgentStatus.COMPLETED, agent.state.node), now)
        if enforced.violated:
            note = self.notify(agent, NotificationKind.POLICY_VIOLATION, now, digest)
            return MissionOutcome(OutcomeKind.TRUNCATED, note, enforced.committed, digest,
                                  enforced.violation_index)
        note = self.notify(agent, NotificationKind.MISSION_COMPLETE, now, digest)
        return MissionOutcome(OutcomeKind.COMPLETED, note, enforced.committed, digest)

    def vanish(self, agent: AgentInstance, now: int) -> MissionOutcome:
        """The agent's host disconnected while the agent was bound to it."""
        note = self.self_destruct(agent, NotificationKind.HOST_UNREACHABLE, DestroyCause.MISSION_END, now)
        return MissionOutcome(OutcomeKind.HOST_VANISHED, note)

    def hostile(self, agent: AgentInstance, now: int) -> Notification:
        """The host turned hostile mid-execution."""
        return self.self_destruct(agent, NotificationKind.COMPROMISED, DestroyCause.HOSTILE, now)

    def migrate_and_execute(
        self,
        agent: AgentInstance,
        epoch: Optional[PolicyEpoch],
        mechanism: Mechanism,
        automaton: SecurityAutomaton,
        host_credential: Credential,
        oracle: Iterable[bool] = (),
        now: int = 0,
        duration: int = 0,
    ) -> MissionOutcome:
        """Whole mission in one call, for hosts that stay connected."""
        if agent.state.status is not AgentStatus.INSTANTIATED or agent.mission is None:
            raise IllegalTransition(f"agent {agent.token_id} has no mission to start")
        self.begin_migration(agent, now)
        failed = self.arrive(agent, host_credential, now, epoch)
        if failed is not None:
            return failed
        enforced = self.execute(agent, automaton, mechanism, oracle)
        return self.finish(agent, enforced, now + duration)

    # -- parent side ---------------------------------------------------------

    def dispatch(self, parent: AgentInstance, task: TaskId, target: NodeId, now: int,
                 deadline: int) -> AgentInstance:
        mission = self.new_mission(task, target, now, deadline)
        child = self.spawn_secondary(parent, mission, now)
        self.tasks[task].attempts += 1
        return child

    def excluded_for(self, task: TaskId, now: int) -> set:
        record = self.tasks[task]
        cooling = {n for n, t in record.failed_at.items() if now - t < self.cooldown}
        return cooling | self.suspects

    def cooldown_ends(self, task: TaskId) -> list:
        return sorted(t + self.cooldown for t in self.tasks[task].failed_at.values())

    def handle_notification(
        self,
        parent: AgentInstance,
        note: Notification,
        eligible: Iterable[NodeId],
        now: int = 0,
        deadline: Optional[int] = None,
    ) -> Reassignment | GiveUp | ResultAccepted:
        if note.to != parent.token_id:
            raise NotMyChild(f"notification for {note.to} delivered to {parent.token_id}")
        child = self.agents[note.sender]
        task = self.tasks[child.mission.task]
        if not note.kind.is_failure:
            validation = self.coordinator.validate_chain(child.token)
            self.coordinator.revoke(child.token_id)
            if not validation:
                self.record(now, "giveup", task=task.task_id, reason=GiveUpReason.INVALID_RESULT.value,
                            why=validation.reason.value)
                return GiveUp(task.task_id, GiveUpReason.INVALID_RESULT)
            task.done = True
            task.result = note.digest
            truncated = note.kind is NotificationKind.POLICY_VIOLATION
            self.record(now, "result", task=task.task_id, host=note.host, digest=note.digest,
                        truncated=int(truncated))
            return ResultAccepted(task.task_id, note.digest, note.host, validation, truncated)

        self.coordinator.revoke(child.token_id)
        task.failed_at[note.host] = now
        if note.kind is NotificationKind.COMPROMISED:
            self.suspects.add(note.host)
        if task.attempts - 1 >= self.retry_budget:
            task.abandoned = True
            self.record(now, "giveup", task=task.task_id, reason=GiveUpReason.BUDGET_EXHAUSTED.value)
            return GiveUp(task.task_id, GiveUpReason.BUDGET_EXHAUSTED)
        target = select_provider(eligible, self.excluded_for(task.task_id, now) | {note.host})
        if target is None:
            self.record(now, "giveup", task=task.task_id, reason=GiveUpReason.TASKS_PENDING.value)
            return GiveUp(task.task_id, GiveUpReason.TASKS_PENDING)
        if deadline is None:
            deadline = max(child.mission.deadline, now + 1)
        agent = self.dispatch(parent, task.task_id, target, now, deadline)
        self.record(now, "reassign", task=task.task_id, mission=agent.mission.mission_id,
                    target=target, attempts=task.attempts)
        return Reassignment(agent.mission, agent)
