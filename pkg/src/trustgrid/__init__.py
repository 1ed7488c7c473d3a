"""Trust and security for a volunteer computing grid: a federation
coordinator issuing attenuated capability tokens, a tiny guest language,
security-automaton enforcement, mobile agents and a deterministic
discrete-event simulator."""

from trustgrid.enforcement import Mechanism, SecurityAutomaton, enforce, parse_policy
from trustgrid.federation import Capability, Coordinator
from trustgrid.guest import GuestProgram, parse_program
from trustgrid.scenario import Scenario, load_scenario, parse_scenario
from trustgrid.simulator import Simulation, run

__all__ = [
    "Capability",
    "Coordinator",
    "GuestProgram",
    "Mechanism",
    "Scenario",
    "SecurityAutomaton",
    "Simulation",
    "enforce",
    "load_scenario",
    "parse_policy",
    "parse_program",
    "parse_scenario",
    "run",
]
