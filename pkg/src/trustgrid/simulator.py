"""Deterministic discrete-event simulation of a volunteer grid.

Time is integer ticks. Events sit in one queue ordered by ``(time, seq)``
where ``seq`` is assigned at insertion, so simultaneous events run in
insertion order. Every state change is appended to the trace as::

    time<TAB>seq<TAB>kind<TAB>key=value key=value ...

with keys sorted; ``seq`` is that of the event being processed. Identical
scenarios produce byte-identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from trustgrid.agents import (
    AgentInstance,
    AgentRuntime,
    AgentStatus,
    DestroyCause,
    GiveUp,
    GiveUpReason,
    Notification,
    Reassignment,
    ResultAccepted,
    TaskRecord,
)
from trustgrid.enforcement import Enforced, longest_safe_prefix
from trustgrid.federation import (
    ALL_CAPABILITIES,
    TAG_LEN,
    Accepted,
    AdmissionRule,
    Coordinator,
    Credential,
    PolicyEpoch,
    disseminate,
    select_provider,
)
from trustgrid.guest import branch_count
from trustgrid.scenario import (
    PURPOSE_BRANCH,
    PURPOSE_KEY,
    ChurnEvent,
    Scenario,
    churn_process,
    derive_rng,
)

__all__ = ["EventTrace", "Metrics", "Simulation", "run", "select_provider"]

logger = logging.getLogger(__name__)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (set, frozenset, list, tuple)):
        return ",".join(str(v) for v in sorted(value)) or "-"
    return str(value)


@dataclass(frozen=True)
class TraceRecord:
    time: int
    seq: int
    kind: str
    details: tuple  # sorted (key, value-text) pairs

    def line(self) -> str:
        details = " ".join(f"{k}={v}" for k, v in self.details)
        return f"{self.time}\t{self.seq}\t{self.kind}\t{details}"


class EventTrace:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def append(self, time: int, seq: int, kind: str, **details) -> None:
        pairs = tuple(sorted((k, _fmt(v)) for k, v in details.items()))
        self.records.append(TraceRecord(time, seq, kind, pairs))

    def kinds(self, kind: str) -> list:
        return [r for r in self.records if r.kind == kind]

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Metrics:
    jobs_completed: int = 0
    tasks_dispatched: int = 0
    tasks_completed: int = 0
    tasks_reassigned: int = 0
    giveups: int = 0
    violations_blocked: int = 0
    epoch_count: int = 0
    messages: int = 0
    mean_job_latency: Fraction = Fraction(0)
    wasted_work: int = 0

    def conserved(self) -> bool:
        return self.tasks_dispatched == self.tasks_completed + self.tasks_reassigned + self.giveups

    def to_text(self) -> str:
        values = dict(self.__dict__)
        values["mean_job_latency"] = f"{float(self.mean_job_latency):.3f}"
        return "".join(f"{k}={values[k]}\n" for k in sorted(values))

    @classmethod
    def from_text(cls, text: str) -> "Metrics":
        out = cls()
        for line in text.splitlines():
            key, value = line.split("=", 1)
            setattr(out, key, Fraction(value) if key == "mean_job_latency" else int(value))
        return out


# -- event payloads ----------------------------------------------------------

@dataclass(frozen=True)
class Connect:
    node: int


@dataclass(frozen=True)
class Disconnect:
    node: int


@dataclass(frozen=True)
class Compromise:
    node: int


@dataclass(frozen=True)
class Submit:
    job: int


@dataclass(frozen=True)
class EpochDelivery:
    node: int
    version: int
    digest: str


@dataclass(frozen=True)
class Dispatch:
    agent: int  # token id; fires when the agent reaches its target


@dataclass(frozen=True)
class ExecStep:
    agent: int


@dataclass(frozen=True)
class NotificationDelivery:
    note: Notification


@dataclass(frozen=True)
class Wake:
    pass


@dataclass
class _Host:
    spec: object
    connected: bool = False
    compromised: bool = False
    compromised_since: Optional[int] = None
    bound: set = field(default_factory=set)  # token ids migrating to or active on it
    observed_version: int = 0


@dataclass
class _Job:
    spec: object
    tasks: list
    submitted: Optional[int] = None
    finished: Optional[int] = None


@dataclass(frozen=True)
class AcceptedResult:
    task: int
    host: int
    time: int
    valid: bool
    host_compromised: bool


class Simulation:
    def __init__(self, scenario: Scenario):
        self.s = scenario
        self.trace = EventTrace()
        self.metrics = Metrics()
        self._queue: list = []
        self._seq = 0
        self.now = 0
        self._current_seq = 0

        key = hashlib.sha256(f"{scenario.seed ^ PURPOSE_KEY}".encode()).digest()[:TAG_LEN]
        self.coordinator = Coordinator(key, scenario.policy.policy_id)
        self.coordinator.add_epoch_listener(self._on_epoch)
        self.runtime = AgentRuntime(
            self.coordinator, scenario.retry_budget, scenario.cooldown, emit=self._on_runtime_record,
        )
        self.rule = AdmissionRule(denylist=scenario.denylist)
        self.hosts = {n.node: _Host(n) for n in scenario.nodes}
        self.mains: dict[int, AgentInstance] = {}
        self.jobs: dict[int, _Job] = {}
        self.task_job: dict[int, int] = {}
        self.task_owner: dict[int, int] = {}
        self.pending: list[int] = []
        self.open_missions: set[int] = set()
        self._enforced: dict[int, Enforced] = {}
        self._wakes: set[int] = set()
        self._last_epoch = PolicyEpoch(0, frozenset(), frozenset(), scenario.policy.policy_id)
        self.accepted: list[AcceptedResult] = []
        self.epoch_problems: list[str] = []
        self._latency_total = 0
        self._ran = False

        task_id = 1
        for job in scenario.jobs:
            ids = []
            for spec in job.tasks:
                program = scenario.program(spec.program_name)
                rng = derive_rng(scenario.seed, PURPOSE_BRANCH, task_id)
                oracle = tuple(rng.random() < 0.5 for _ in range(branch_count(program.body)))
                self.runtime.tasks[task_id] = TaskRecord(task_id, program, spec.duration, oracle)
                self.task_job[task_id] = job.job_id
                self.task_owner[task_id] = job.owner
                ids.append(task_id)
                task_id += 1
            self.jobs[job.job_id] = _Job(job, ids)

    # -- queue -----------------------------------------------------------------

    def schedule(self, time: int, payload) -> None:
        heapq.heappush(self._queue, (time, self._seq, payload))
        self._seq += 1

    def log(self, kind: str, **details) -> None:
        self.trace.append(self.now, self._current_seq, kind, **details)

    def _on_runtime_record(self, now: int, kind: str, details: dict) -> None:
        self.trace.append(now, self._current_seq, kind, **details)

    def _on_epoch(self, epoch: PolicyEpoch) -> None:
        prev = self._last_epoch
        joined = epoch.membership - prev.membership
        left = prev.membership - epoch.membership
        grew = epoch.revoked - prev.revoked
        if len(joined) + len(left) > 1 or (not joined and not left and not grew):
            self.epoch_problems.append(f"epoch {epoch.version}: change is not a single step")
        if not prev.revoked <= epoch.revoked:
            self.epoch_problems.append(f"epoch {epoch.version}: revocations shrank")
        self._last_epoch = epoch
        digest = epoch.digest()
        self.log("epoch", version=epoch.version, digest=digest, members=len(epoch.membership),
                 revoked=len(epoch.revoked))
        for node, version in disseminate(epoch, epoch.membership, prev.version):
            self.schedule(self.now + self.s.dissemination_latency, EpochDelivery(node, version, digest))

    # -- helpers ---------------------------------------------------------------

    def effective_duration(self, duration: int) -> int:
        idle = 1 - self.s.busy_fraction
        if idle == 0:
            return self.s.horizon + 1
        return math.ceil(Fraction(duration) / idle)

    def credential_of(self, node: int) -> Credential:
        genuine = self.coordinator.credentials[node]
        if not self.hosts[node].compromised:
            return genuine
        # a compromised host cannot present the coordinator-issued tag
        forged = bytes(b ^ 0x5A for b in genuine.secret_tag)
        return Credential(node, forged, genuine.issued_epoch)

    def eligible_hosts(self) -> set:
        return {
            n for n, h in self.hosts.items()
            if h.connected and h.spec.role.provides and len(h.bound) < h.spec.slots
        }

    def _owner_agent(self, task: int) -> Optional[AgentInstance]:
        agent = self.mains.get(self.task_owner[task])
        return agent if agent is not None and agent.live else None

    def _bind(self, agent: AgentInstance) -> None:
        self.hosts[agent.mission.target].bound.add(agent.token_id)

    def _unbind(self, agent: AgentInstance) -> None:
        self.hosts[agent.mission.target].bound.discard(agent.token_id)

    def _launch(self, agent: AgentInstance) -> None:
        self.metrics.tasks_dispatched += 1
        self.metrics.messages += 1
        self.open_missions.add(agent.mission.mission_id)
        self._bind(agent)
        self.runtime.begin_migration(agent, self.now)
        self.log("dispatch", token=agent.token_id, mission=agent.mission.mission_id,
                 task=agent.mission.task, target=agent.mission.target)
        self.schedule(self.now + self.s.dispatch_latency, Dispatch(agent.token_id))

    def _close(self, mission: int) -> None:
        self.open_missions.discard(mission)

    def _requeue(self, task: int) -> None:
        record = self.runtime.tasks[task]
        if not record.done and not record.abandoned and task not in self.pending:
            self.pending.append(task)
            self.pending.sort()
            for t in self.runtime.cooldown_ends(task):
                if t > self.now and t not in self._wakes:
                    self._wakes.add(t)
                    self.schedule(t, Wake())

    def _dispatch_pending(self) -> None:
        if not self.pending:
            return
        eligible = self.eligible_hosts()
        if not eligible:
            return
        for task in list(self.pending):
            owner = self._owner_agent(task)
            if owner is None or owner.state.status is not AgentStatus.ACTIVE:
                continue
            target = select_provider(eligible, self.runtime.excluded_for(task, self.now))
            if target is None:
                continue
            self.pending.remove(task)
            agent = self.runtime.dispatch(owner, task, target, self.now, self.s.horizon + 1)
            self._launch(agent)
            eligible = self.eligible_hosts()
            if not eligible:
                return

    # -- handlers ----------------------------------------------------------------

    def _handle(self, payload) -> None:
        handler = getattr(self, "_on_" + type(payload).__name__)
        handler(payload)

    def _on_Connect(self, ev: Connect) -> None:
        host = self.hosts[ev.node]
        if host.connected:
            return
        decision = self.coordinator.subscribe(ev.node, ALL_CAPABILITIES, self.rule)
        if not isinstance(decision, Accepted):
            self.log("rejected", node=ev.node, reason=decision.reason.value)
            return
        host.connected = True
        host.observed_version = 0
        self.log("connect", node=ev.node, token=decision.token.token_id)
        agent = self.runtime.spawn_main(decision, self.now)
        self.runtime.activate_main(agent, ev.node, self.now)
        self.mains[ev.node] = agent

    def _on_Disconnect(self, ev: Disconnect) -> None:
        host = self.hosts[ev.node]
        if not host.connected:
            self.log("ignored", node=ev.node, reason="NotSubscribed")
            return
        host.connected = False
        self.log("disconnect", node=ev.node)
        for token in sorted(host.bound):
            agent = self.runtime.agents[token]
            if agent.state.status is AgentStatus.ACTIVE:
                self.metrics.wasted_work += self.now - agent.exec_started
            outcome = self.runtime.vanish(agent, self.now)
            self._send(outcome.notification)
        host.bound.clear()
        self.coordinator.disconnect(ev.node)
        main = self.mains.pop(ev.node, None)
        if main is None:
            return
        self.runtime.destroy_silently(main, DestroyCause.DISCONNECT, self.now)
        for child in self.runtime.live_descendants(main):
            if child.state.status is AgentStatus.ACTIVE:
                self.metrics.wasted_work += self.now - child.exec_started
            self.runtime.destroy_silently(child, DestroyCause.PARENT_REVOKED, self.now)
            self._unbind(child)
            self._give_up(child.mission.task, child.mission.mission_id, GiveUpReason.OWNER_DISCONNECTED)

    def _on_Compromise(self, ev: Compromise) -> None:
        host = self.hosts[ev.node]
        host.compromised = True
        host.compromised_since = self.now
        self.log("compromise", node=ev.node)
        for token in sorted(host.bound):
            agent = self.runtime.agents[token]
            if agent.state.status is not AgentStatus.ACTIVE:
                continue  # still migrating; the handshake will catch it
            self.metrics.wasted_work += self.now - agent.exec_started
            self._send(self.runtime.hostile(agent, self.now))
            host.bound.discard(token)

    def _on_Submit(self, ev: Submit) -> None:
        job = self.jobs[ev.job]
        job.submitted = self.now
        self.log("submit", job=ev.job, tasks=len(job.tasks))
        for task in job.tasks:
            self._requeue(task)

    def _on_EpochDelivery(self, ev: EpochDelivery) -> None:
        host = self.hosts[ev.node]
        if not host.connected:
            return
        if ev.version <= host.observed_version:
            self.epoch_problems.append(f"node {ev.node} saw version {ev.version} after {host.observed_version}")
        host.observed_version = ev.version
        self.log("deliver", node=ev.node, version=ev.version, digest=ev.digest)

    def _on_Dispatch(self, ev: Dispatch) -> None:
        agent = self.runtime.agents[ev.agent]
        if agent.state.status is not AgentStatus.MIGRATING:
            return
        target = agent.mission.target
        failed = self.runtime.arrive(agent, self.credential_of(target), self.now)
        if failed is not None:
            self._unbind(agent)
            if failed.notification is not None:
                self._send(failed.notification)
            else:
                self._give_up(agent.mission.task, agent.mission.mission_id, GiveUpReason.OWNER_DISCONNECTED)
            return
        record = self.runtime.tasks[agent.mission.task]
        enforced = self.runtime.execute(agent, self.s.policy, self.s.mechanism, record.oracle)
        self._enforced[agent.token_id] = enforced
        self.log("exec", token=agent.token_id, host=target, events=len(enforced.committed),
                 mechanism=self.s.mechanism.value, guards=enforced.guard_count,
                 violation=-1 if enforced.violation_index is None else enforced.violation_index)
        self.schedule(self.now + self.effective_duration(record.duration), ExecStep(agent.token_id))

    def _on_ExecStep(self, ev: ExecStep) -> None:
        agent = self.runtime.agents[ev.agent]
        if agent.state.status is not AgentStatus.ACTIVE:
            return
        enforced = self._enforced.pop(agent.token_id)
        if enforced.violated:
            self.metrics.violations_blocked += 1
        outcome = self.runtime.finish(agent, enforced, self.now)
        self._unbind(agent)
        self._send(outcome.notification)

    def _send(self, note: Notification) -> None:
        self.schedule(self.now + self.s.notification_latency, NotificationDelivery(note))

    def _on_NotificationDelivery(self, ev: NotificationDelivery) -> None:
        note = ev.note
        self.metrics.messages += 1
        child = self.runtime.agents[note.sender]
        task = child.mission.task
        parent = self.runtime.agents.get(note.to)
        if parent is None or not parent.live:
            self.coordinator.revoke(child.token_id)
            self._give_up(task, note.mission, GiveUpReason.OWNER_DISCONNECTED)
            return
        result = self.runtime.handle_notification(
            parent, note, self.eligible_hosts(), self.now, self.s.horizon + 1,
        )
        self._close(note.mission)
        if isinstance(result, ResultAccepted):
            self.metrics.tasks_completed += 1
            since = self.hosts[result.host].compromised_since
            self.accepted.append(AcceptedResult(
                task, result.host, self.now, result.validation.valid, since is not None and since <= note.at,
            ))
            self._check_job(self.task_job[task])
        elif isinstance(result, Reassignment):
            self.metrics.tasks_reassigned += 1
            self._launch(result.agent)
        else:
            self.metrics.giveups += 1
            self._requeue(task)

    def _give_up(self, task: int, mission: int, reason: GiveUpReason) -> None:
        self.metrics.giveups += 1
        self._close(mission)
        self.log("giveup", task=task, mission=mission, reason=reason.value)
        self._requeue(task)

    def _check_job(self, job_id: int) -> None:
        job = self.jobs[job_id]
        if job.finished is None and all(self.runtime.tasks[t].done for t in job.tasks):
            job.finished = self.now
            self.metrics.jobs_completed += 1
            self._latency_total += self.now - job.submitted
            self.log("JobComplete", job=job_id, latency=self.now - job.submitted)

    def _on_Wake(self, ev: Wake) -> None:
        self._wakes.discard(self.now)

    # -- driver ------------------------------------------------------------------

    def run(self) -> tuple:
        if self._ran:
            raise RuntimeError("a Simulation runs once")
        self._ran = True
        s = self.s
        self.log("start", seed=s.seed, horizon=s.horizon, mechanism=s.mechanism.value)
        for spec in s.nodes:
            for time, kind in churn_process(spec.churn, s.seed, s.horizon, spec.node):
                self.schedule(time, Connect(spec.node) if kind is ChurnEvent.CONNECT else Disconnect(spec.node))
            if spec.compromised_at is not None and spec.compromised_at <= s.horizon:
                self.schedule(spec.compromised_at, Compromise(spec.node))
        for job in s.jobs:
            if job.submit <= s.horizon:
                self.schedule(job.submit, Submit(job.job_id))

        while self._queue and self._queue[0][0] <= s.horizon:
            time, seq, payload = heapq.heappop(self._queue)
            self.now, self._current_seq = time, seq
            self._handle(payload)
            self._dispatch_pending()

        self.now = s.horizon
        self._current_seq = self._seq
        for mission in sorted(self.open_missions):
            self.metrics.giveups += 1
            self.log("giveup", mission=mission, reason=GiveUpReason.HORIZON.value)
        self.open_missions.clear()

        m = self.metrics
        m.epoch_count = self.coordinator.epoch.version
        if m.jobs_completed:
            m.mean_job_latency = Fraction(self._latency_total, m.jobs_completed)
        return self.trace, m

    # -- audit -------------------------------------------------------------------

    def audit(self) -> list:
        """Invariant breaches found in a finished run; empty when all hold."""
        problems = list(self.epoch_problems)
        m = self.metrics
        if not m.conserved():
            problems.append(
                f"conservation: dispatched {m.tasks_dispatched} != completed {m.tasks_completed}"
                f" + reassigned {m.tasks_reassigned} + giveups {m.giveups}"
            )
        for result in self.accepted:
            if not result.valid:
                problems.append(f"task {result.task}: result accepted without a valid token chain")
            if result.host_compromised:
                problems.append(f"task {result.task}: result accepted from compromised node {result.host}")
        for host, mission, events in self.runtime.committed:
            if longest_safe_prefix(self.s.policy, events) != len(events):
                problems.append(f"mission {mission}: host {host} committed a policy-violating event")
        for agent in self.runtime.agents.values():
            if agent.state.status is AgentStatus.DESTROYED:
                silent = agent.state.cause in (DestroyCause.PARENT_REVOKED, DestroyCause.DISCONNECT)
                if not silent and agent.notifications_sent != 1:
                    problems.append(f"agent {agent.token_id} destroyed without exactly one notification")
            if not agent.is_main and agent.token.caps != agent.mission.required_caps:
                problems.append(f"agent {agent.token_id} holds more than its mission needs")
        return problems


def run(scenario: Scenario) -> tuple:
    """Run a scenario; returns ``(EventTrace, Metrics)``."""
    return Simulation(scenario).run()
