"""Identity-provider side of the grid: subscription, delegated capability
tokens, revocation cascades, policy epochs and host authentication.

Tokens and credentials are authenticated with a keyed tag (HMAC-SHA256
truncated to 16 bytes) under a single coordinator key. Every tag is computed
over a canonical byte layout: fields in declaration order, big-endian
integers, length-prefixed sets sorted ascending.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Callable, Iterable, Optional

from trustgrid.errors import (
    AlreadySubscribed,
    AttenuationViolation,
    NotSubscribed,
    ParentRevoked,
    UnknownToken,
)

logger = logging.getLogger(__name__)

TAG_LEN = 16

NodeId = int
TokenId = int
MissionId = int


class Capability(IntEnum):
    READ_HOST_DATA = 0
    WRITE_HOST_DATA = 1
    COMPUTE = 2
    SEND_MESSAGE = 3
    SPAWN_DELEGATE = 4

    @property
    def label(self) -> str:
        return _CAP_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Capability":
        for cap, name in _CAP_LABELS.items():
            if name == label:
                return cap
        raise ValueError(f"unknown capability {label!r}")


_CAP_LABELS = {
    Capability.READ_HOST_DATA: "ReadHostData",
    Capability.WRITE_HOST_DATA: "WriteHostData",
    Capability.COMPUTE: "Compute",
    Capability.SEND_MESSAGE: "SendMessage",
    Capability.SPAWN_DELEGATE: "SpawnDelegate",
}

ALL_CAPABILITIES = frozenset(Capability)


def format_caps(caps: Iterable[Capability]) -> str:
    return ",".join(c.label for c in sorted(caps)) or "-"


# -- canonical encoding ------------------------------------------------------

def _u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def _opt_u64(value: Optional[int]) -> bytes:
    if value is None:
        return b"\x00" + _u64(0)
    return b"\x01" + _u64(value)


def _int_set(values: Iterable[int], width: str = "Q") -> bytes:
    items = sorted(values)
    return struct.pack(">I", len(items)) + b"".join(struct.pack(">" + width, v) for v in items)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError("truncated token encoding")
        (value,) = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return value

    def opt_u64(self) -> Optional[int]:
        flag = self.take(">B")
        value = self.take(">Q")
        if flag == 0:
            if value != 0:
                raise ValueError("absent optional carries a value")
            return None
        if flag != 1:
            raise ValueError("bad presence flag")
        return value


# -- domain types ------------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    node: NodeId
    secret_tag: bytes
    issued_epoch: int

    def __post_init__(self):
        if len(self.secret_tag) != TAG_LEN:
            raise ValueError(f"credential tag must be {TAG_LEN} bytes")

    def field_bytes(self) -> bytes:
        return b"C" + _u64(self.node) + _u64(self.issued_epoch)


@dataclass(frozen=True)
class CapabilityToken:
    token_id: TokenId
    parent: Optional[TokenId]
    subject: NodeId
    caps: frozenset
    mission: Optional[MissionId]
    issued_epoch: int
    depth: int
    auth_tag: bytes = b""

    @property
    def is_main(self) -> bool:
        return self.parent is None

    def field_bytes(self) -> bytes:
        return (
            b"T"
            + _u64(self.token_id)
            + _opt_u64(self.parent)
            + _u64(self.subject)
            + _int_set((int(c) for c in self.caps), "B")
            + _opt_u64(self.mission)
            + _u64(self.issued_epoch)
            + struct.pack(">I", self.depth)
        )

    def to_bytes(self) -> bytes:
        return self.field_bytes() + self.auth_tag

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CapabilityToken":
        """Decode a serialized token; raises ValueError if malformed."""
        r = _Reader(blob)
        if r.take(">c") != b"T":
            raise ValueError("not a token encoding")
        token_id = r.take(">Q")
        parent = r.opt_u64()
        subject = r.take(">Q")
        count = r.take(">I")
        codes = [r.take(">B") for _ in range(count)]
        if codes != sorted(set(codes)):
            raise ValueError("capability set not canonical")
        caps = frozenset(Capability(c) for c in codes)
        mission = r.opt_u64()
        issued_epoch = r.take(">Q")
        depth = r.take(">I")
        tag = blob[r.pos:]
        if len(tag) != TAG_LEN:
            raise ValueError("bad tag length")
        return cls(token_id, parent, subject, caps, mission, issued_epoch, depth, tag)


@dataclass(frozen=True)
class PolicyEpoch:
    version: int
    membership: frozenset
    revoked: frozenset
    active_policy: str

    def to_bytes(self) -> bytes:
        name = self.active_policy.encode()
        return (
            b"E"
            + _u64(self.version)
            + _int_set(self.membership)
            + _int_set(self.revoked)
            + struct.pack(">H", len(name))
            + name
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


class RejectReason(Enum):
    DENYLISTED = "Denylisted"


@dataclass(frozen=True)
class Accepted:
    token: CapabilityToken


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason


SubscriptionDecision = Accepted | Rejected


@dataclass(frozen=True)
class AdmissionRule:
    allowed: frozenset = ALL_CAPABILITIES
    denylist: frozenset = frozenset()

    def check(self, node: NodeId) -> Optional[RejectReason]:
        if node in self.denylist:
            return RejectReason.DENYLISTED
        return None


class InvalidReason(Enum):
    BAD_TAG = "BadTag"
    REVOKED = "Revoked"
    SUBJECT_NOT_MEMBER = "SubjectNotMember"
    BROKEN_ATTENUATION = "BrokenAttenuation"


@dataclass(frozen=True)
class Validation:
    """Result of a chain check. Truthy iff the chain is valid."""

    reason: Optional[InvalidReason] = None

    @property
    def valid(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.valid


VALID = Validation()


class Side(Enum):
    AGENT = "Agent"
    HOST = "Host"


@dataclass(frozen=True)
class Session:
    token_id: TokenId
    host: NodeId
    epoch_version: int


@dataclass(frozen=True)
class HandshakeFailure:
    side: Side
    reason: InvalidReason


@dataclass(frozen=True)
class AuditRecord:
    kind: str
    details: dict = field(default_factory=dict)


# -- coordinator -------------------------------------------------------------

class Coordinator:
    """The stationary identity provider. Single writer of federation state."""

    def __init__(self, key: bytes, active_policy: str = "default"):
        if not key:
            raise ValueError("coordinator key must be non-empty")
        self._key = key
        self._epoch = PolicyEpoch(0, frozenset(), frozenset(), active_policy)
        self._tokens: dict[TokenId, CapabilityToken] = {}
        self._children: dict[TokenId, list[TokenId]] = {}
        self._main: dict[NodeId, TokenId] = {}
        self._next_token = 1
        self.credentials: dict[NodeId, Credential] = {}
        self.audit: list[AuditRecord] = []
        self._listeners: list[Callable[[PolicyEpoch], None]] = []

    @property
    def epoch(self) -> PolicyEpoch:
        return self._epoch

    def add_epoch_listener(self, callback: Callable[[PolicyEpoch], None]) -> None:
        self._listeners.append(callback)

    def token(self, token_id: TokenId) -> CapabilityToken:
        try:
            return self._tokens[token_id]
        except KeyError:
            raise UnknownToken(token_id) from None

    def main_token(self, node: NodeId) -> Optional[CapabilityToken]:
        tid = self._main.get(node)
        return None if tid is None else self._tokens[tid]

    def children(self, token_id: TokenId) -> tuple:
        return tuple(self._children.get(token_id, ()))

    def subtree(self, token_id: TokenId) -> frozenset:
        """token_id and all of its descendants."""
        if token_id not in self._tokens:
            raise UnknownToken(token_id)
        out, stack = set(), [token_id]
        while stack:
            tid = stack.pop()
            out.add(tid)
            stack.extend(self._children.get(tid, ()))
        return frozenset(out)

    # tags

    def _tag(self, payload: bytes) -> bytes:
        return hmac.new(self._key, payload, hashlib.sha256).digest()[:TAG_LEN]

    def _tag_ok(self, payload: bytes, tag: bytes) -> bool:
        return hmac.compare_digest(self._tag(payload), tag)

    def _advance(self, membership=None, revoked=None) -> PolicyEpoch:
        old = self._epoch
        self._epoch = PolicyEpoch(
            old.version + 1,
            old.membership if membership is None else frozenset(membership),
            old.revoked if revoked is None else frozenset(revoked),
            old.active_policy,
        )
        logger.debug("epoch %d", self._epoch.version)
        for callback in self._listeners:
            callback(self._epoch)
        return self._epoch

    def _mint(self, parent, subject, caps, mission, depth) -> CapabilityToken:
        unsigned = CapabilityToken(
            self._next_token, parent, subject, frozenset(caps), mission,
            self._epoch.version, depth,
        )
        self._next_token += 1
        token = replace(unsigned, auth_tag=self._tag(unsigned.field_bytes()))
        self._tokens[token.token_id] = token
        if parent is not None:
            self._children.setdefault(parent, []).append(token.token_id)
        return token

    # operations

    def subscribe(
        self,
        node: NodeId,
        requested_caps: Iterable[Capability],
        rule: AdmissionRule = AdmissionRule(),
    ) -> SubscriptionDecision:
        if node in self._epoch.membership:
            raise AlreadySubscribed(node)
        reason = rule.check(node)
        if reason is not None:
            self.audit.append(AuditRecord("reject", {"node": node, "reason": reason.value}))
            return Rejected(reason)
        self._advance(membership=self._epoch.membership | {node})
        token = self._mint(None, node, frozenset(requested_caps) & rule.allowed, None, 0)
        self._main[node] = token.token_id
        self.credentials[node] = self.issue_credential(node)
        self.audit.append(AuditRecord("subscribe", {"node": node, "token": token.token_id}))
        return Accepted(token)

    def disconnect(self, node: NodeId) -> PolicyEpoch:
        if node not in self._epoch.membership:
            raise NotSubscribed(node)
        revoked = set(self._epoch.revoked)
        main = self._main.get(node)
        if main is not None:
            revoked |= self.subtree(main)
        self.audit.append(AuditRecord("disconnect", {"node": node}))
        return self._advance(membership=self._epoch.membership - {node}, revoked=revoked)

    def issue_delegate(
        self,
        parent: CapabilityToken,
        mission: Optional[MissionId],
        requested_caps: Iterable[Capability],
    ) -> CapabilityToken:
        check = self.validate_chain(parent)
        if not check:
            raise ParentRevoked(f"parent {parent.token_id}: {check.reason.value}")
        requested = frozenset(requested_caps)
        if not requested <= parent.caps:
            raise AttenuationViolation(
                f"requested {format_caps(requested)} exceeds parent {format_caps(parent.caps)}"
            )
        return self._mint(parent.token_id, parent.subject, requested, mission, parent.depth + 1)

    def revoke(self, token_id: TokenId) -> frozenset:
        """Revoke a token and its descendants; returns the newly revoked ids."""
        fresh = self.subtree(token_id) - self._epoch.revoked
        if not fresh:
            return frozenset()
        self._advance(revoked=self._epoch.revoked | fresh)
        self.audit.append(AuditRecord("revoke", {"token": token_id, "count": len(fresh)}))
        return fresh

    def validate_chain(self, token: CapabilityToken, epoch: Optional[PolicyEpoch] = None) -> Validation:
        return self._validate(token, token.field_bytes(), epoch or self._epoch)

    def validate_serialized(self, blob: bytes, epoch: Optional[PolicyEpoch] = None) -> Validation:
        """Validate a token received as bytes; undecodable input is a bad tag."""
        try:
            token = CapabilityToken.from_bytes(blob)
        except ValueError:
            return Validation(InvalidReason.BAD_TAG)
        return self._validate(token, blob[: len(blob) - TAG_LEN], epoch or self._epoch)

    def _validate(self, token: CapabilityToken, payload: bytes, epoch: PolicyEpoch) -> Validation:
        # structural and tag checks first, then revocation, membership, attenuation
        if not self._tag_ok(payload, token.auth_tag):
            return Validation(InvalidReason.BAD_TAG)
        chain = [token]
        seen = {token.token_id}
        while chain[-1].parent is not None:
            parent = self._tokens.get(chain[-1].parent)
            if parent is None or parent.token_id in seen:
                return Validation(InvalidReason.BAD_TAG)
            seen.add(parent.token_id)
            chain.append(parent)
        for child, parent in zip(chain, chain[1:]):
            if child.depth != parent.depth + 1 or not self._tag_ok(parent.field_bytes(), parent.auth_tag):
                return Validation(InvalidReason.BAD_TAG)
        if chain[-1].depth != 0:
            return Validation(InvalidReason.BAD_TAG)
        if any(t.token_id in epoch.revoked for t in chain):
            return Validation(InvalidReason.REVOKED)
        if chain[-1].subject not in epoch.membership:
            return Validation(InvalidReason.SUBJECT_NOT_MEMBER)
        for child, parent in zip(chain, chain[1:]):
            if not child.caps <= parent.caps:
                return Validation(InvalidReason.BROKEN_ATTENUATION)
        return VALID

    def issue_credential(self, node: NodeId) -> Credential:
        unsigned = Credential(node, bytes(TAG_LEN), self._epoch.version)
        return replace(unsigned, secret_tag=self._tag(unsigned.field_bytes()))

    def verify_credential(self, credential: Credential, epoch: Optional[PolicyEpoch] = None) -> bool:
        epoch = epoch or self._epoch
        return (
            credential.issued_epoch <= epoch.version
            and self._tag_ok(credential.field_bytes(), credential.secret_tag)
        )

    def handshake(
        self,
        agent_token: CapabilityToken,
        host_credential: Credential,
        epoch: Optional[PolicyEpoch] = None,
    ) -> Session | HandshakeFailure:
        epoch = epoch or self._epoch
        check = self.validate_chain(agent_token, epoch)
        if not check:
            return HandshakeFailure(Side.AGENT, check.reason)
        if not self.verify_credential(host_credential, epoch):
            return HandshakeFailure(Side.HOST, InvalidReason.BAD_TAG)
        if host_credential.node not in epoch.membership:
            return HandshakeFailure(Side.HOST, InvalidReason.SUBJECT_NOT_MEMBER)
        return Session(agent_token.token_id, host_credential.node, epoch.version)


def disseminate(
    epoch: PolicyEpoch,
    membership: Iterable[NodeId],
    previous_version: Optional[int] = None,
) -> list:
    """Delivery plan for a new epoch: (node, version) for every connected node,
    ordered by node id."""
    if previous_version is not None and epoch.version != previous_version + 1:
        raise ValueError(
            f"epoch {epoch.version} does not follow disseminated version {previous_version}"
        )
    return [(node, epoch.version) for node in sorted(membership)]


def select_provider(eligible: Iterable[NodeId], excluded: Iterable[NodeId] = ()) -> Optional[NodeId]:
    """Lowest node id in eligible minus excluded, or None."""
    return min(set(eligible) - set(excluded), default=None)
