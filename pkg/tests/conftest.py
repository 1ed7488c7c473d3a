import sys

import pytest

from trustgrid.enforcement import parse_policy

NSAR_TEXT = """\
policy nsar
states S0 S1
initial S0
on S0 read -> S1
on S0 send -> S0
on S0 compute -> S0
on S0 write -> S0
on S1 read -> S1
on S1 compute -> S1
on S1 write -> S1
"""

ALLOW_ALL_TEXT = """\
policy allow
states S
initial S
on S read -> S
on S write -> S
on S send -> S
on S compute -> S
"""


@pytest.fixture
def nsar():
    return parse_policy(NSAR_TEXT)


@pytest.fixture
def allow_all():
    return parse_policy(ALLOW_ALL_TEXT)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[number])
