"""Exception hierarchy shared by every trustgrid module."""

from __future__ import annotations


class TrustGridError(Exception):
    """Base class for all trustgrid errors."""


# federation

class AlreadySubscribed(TrustGridError):
    pass


class NotSubscribed(TrustGridError):
    pass


class UnknownToken(TrustGridError):
    pass


class AttenuationViolation(TrustGridError):
    pass


class ParentRevoked(TrustGridError):
    pass


# guest language

class GuestSyntaxError(TrustGridError):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class LimitExceeded(TrustGridError):
    pass


class OracleExhausted(TrustGridError):
    pass


class TooManyBranches(TrustGridError):
    pass


# enforcement

class PolicyError(TrustGridError):
    def __init__(self, line: int, message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}")


class ReservedRegisterError(TrustGridError):
    """A guest program touches the registers reserved for inlined guards."""


# agent runtime

class RejectedSubscription(TrustGridError):
    pass


class ParentDestroyed(TrustGridError):
    pass


class NotMyChild(TrustGridError):
    pass


class IllegalTransition(TrustGridError):
    pass


# simulator

class ScenarioError(TrustGridError):
    def __init__(self, line: int, message: str, source: str = "<scenario>"):
        self.line = line
        self.message = message
        self.source = source
        super().__init__(f"{source}:{line}: {message}")
