import numpy as np
import pytest

from circuit_sizer.config import resolve_netlist
from circuit_sizer.netlist import build_graph, load_netlist, parse_netlist

TOY_TWO = """
SUPPLY VDD vdd 1.0
SUPPLY GND gnd
DEVICE M1 NMOS a b gnd PARAM W=10 BOUNDS 1 20 STEP 1 PARAM F=4 BOUNDS 1 8 STEP 1
DEVICE M2 PMOS a b vdd PARAM W=10 BOUNDS 1 20 STEP 1 PARAM F=4 BOUNDS 1 8 STEP 1
"""

# five nodes: three devices, supply, ground
TOY_FIVE = """
SUPPLY VDD vdd 2.0
SUPPLY GND gnd
PORT in
DEVICE M1 NMOS x in gnd PARAM W=10 BOUNDS 1 20 STEP 1 PARAM F=4 BOUNDS 1 8 STEP 1
DEVICE M2 PMOS x x vdd PARAM W=12 BOUNDS 1 20 STEP 1 PARAM F=3 BOUNDS 1 8 STEP 1
DEVICE R1 RES x gnd PARAM R=1.5 BOUNDS 0.1 10 STEP 0.1
"""


@pytest.fixture(scope="session")
def opamp():
    return load_netlist(resolve_netlist("opamp"))


@pytest.fixture(scope="session")
def rfpa():
    return load_netlist(resolve_netlist("rfpa"))


@pytest.fixture(scope="session")
def toy_two():
    return parse_netlist(TOY_TWO)


@pytest.fixture(scope="session")
def toy_five():
    return parse_netlist(TOY_FIVE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_adjacency_oracle(netlist):
    """Independent edge construction: list every (node, net) pair, join nodes sharing a net."""
    names, nets = [], []
    for d in netlist.devices:
        names.append(d.name)
        nets.append(set(d.terminals))
    for s in netlist.supplies:
        names.append(s.name)
        nets.append({s.net})
    n = len(names)
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and any(net in nets[j] for net in nets[i]):
                a[i, j] = 1
    return names, a


__all__ = ["TOY_TWO", "TOY_FIVE", "dense_adjacency_oracle", "build_graph"]


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
