"""Netlist parsing and circuit-graph construction.

The input format is line oriented::

    # two-stage op-amp
    SUPPLY VDD vdd 1.0
    SUPPLY GND gnd
    BIAS VB vbias 0.6
    PORT inp inn
    DEVICE M1 NMOS n1 inp tail PARAM W=20 BOUNDS 1 100 STEP 5 PARAM F=8 BOUNDS 2 32 STEP 1
    DEVICE CC CAP out1 out PARAM C=2 BOUNDS 0.1 10 STEP 0.2

Devices become graph nodes, followed by one node per supply, ground and
bias declaration. Two nodes are adjacent when they share at least one net.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class NetlistError(ValueError):
    """Raised for malformed netlists; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DeviceKind(str, Enum):
    NMOS = "NMOS"
    PMOS = "PMOS"
    RES = "RES"
    CAP = "CAP"
    IND = "IND"

    @property
    def is_transistor(self) -> bool:
        return self in (DeviceKind.NMOS, DeviceKind.PMOS)


# One-hot layout of node types; fixed so feature widths match across circuits.
NODE_KINDS = ("NMOS", "PMOS", "RES", "CAP", "IND", "SUPPLY", "GND", "BIAS")
PARAM_SLOTS = 2
FEATURE_DIM = len(NODE_KINDS) + PARAM_SLOTS


@dataclass(frozen=True)
class Param:
    device: str
    name: str
    init: float
    lo: float
    hi: float
    step: float
    integer: bool
    log_scale: bool

    @property
    def full_name(self) -> str:
        return f"{self.device}.{self.name}"

    def normalize(self, value):
        """Map a raw value (or array of values) into [0, 1] using the declared bounds."""
        if self.log_scale:
            return (np.log(value) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))
        return (np.asarray(value, dtype=float) - self.lo) / (self.hi - self.lo)


@dataclass(frozen=True)
class Device:
    name: str
    kind: DeviceKind
    terminals: tuple[str, ...]
    params: tuple[Param, ...]


@dataclass(frozen=True)
class SupplyDef:
    name: str
    kind: str  # SUPPLY, GND or BIAS
    net: str
    volts: float


@dataclass(frozen=True)
class Netlist:
    devices: tuple[Device, ...]
    supplies: tuple[SupplyDef, ...]
    ports: frozenset[str] = frozenset()

    @property
    def params(self) -> tuple[Param, ...]:
        return tuple(p for d in self.devices for p in d.params)

    @property
    def num_params(self) -> int:
        return sum(len(d.params) for d in self.devices)

    @property
    def param_names(self) -> list[str]:
        return [p.full_name for p in self.params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lo for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.hi for p in self.params])

    @property
    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.params])

    @property
    def integer_mask(self) -> np.ndarray:
        return np.array([p.integer for p in self.params], dtype=bool)

    @property
    def init_values(self) -> np.ndarray:
        return np.array([p.init for p in self.params])

    def index_of(self, full_name: str) -> int:
        try:
            return self.param_names.index(full_name)
        except ValueError:
            raise KeyError(f"no tunable parameter named {full_name!r}") from None

    def midpoint(self) -> np.ndarray:
        """Parameter vector at the centre of every bound; integer parameters rounded down."""
        mid = (self.lower + self.upper) / 2.0
        ints = self.integer_mask
        mid[ints] = np.floor(mid[ints])
        return mid

    def supply_voltages(self) -> dict[str, float]:
        return {s.name: s.volts for s in self.supplies}


def _parse_float(token: str, what: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise NetlistError(f"expected a number for {what}, got {token!r}", line) from None
    if not math.isfinite(value):
        raise NetlistError(f"{what} must be finite", line)
    return value


def _is_integral(x: float) -> bool:
    return float(x).is_integer()


def _parse_device(tokens: list[str], line: int) -> Device:
    if len(tokens) < 3:
        raise NetlistError("DEVICE needs a name and a kind", line)
    name, kind_tok = tokens[1], tokens[2].upper()
    try:
        kind = DeviceKind(kind_tok)
    except ValueError:
        raise NetlistError(f"unknown device kind {tokens[2]!r}", line) from None

    rest = tokens[3:]
    terminals = []
    while rest and rest[0].upper() != "PARAM":
        terminals.append(rest.pop(0))
    if not terminals:
        raise NetlistError(f"device {name} has no terminals", line)

    params = []
    while rest:
        # PARAM <pname>=<init> BOUNDS <min> <max> STEP <dx>
        if len(rest) < 7 or rest[0].upper() != "PARAM" or rest[2].upper() != "BOUNDS" \
                or rest[5].upper() != "STEP":
            raise NetlistError(f"malformed PARAM clause for device {name}", line)
        pname, eq, init_tok = rest[1].partition("=")
        if not eq or not pname:
            raise NetlistError(f"expected <name>=<init> in PARAM clause, got {rest[1]!r}", line)
        init = _parse_float(init_tok, f"{name}.{pname} init", line)
        lo = _parse_float(rest[3], f"{name}.{pname} min", line)
        hi = _parse_float(rest[4], f"{name}.{pname} max", line)
        step = _parse_float(rest[6], f"{name}.{pname} step", line)
        if lo >= hi:
            raise NetlistError(f"bounds of {name}.{pname} need min < max, got [{lo}, {hi}]", line)
        if step <= 0:
            raise NetlistError(f"step of {name}.{pname} must be positive", line)
        if not lo <= init <= hi:
            raise NetlistError(f"init of {name}.{pname} lies outside its bounds", line)
        log_scale = not kind.is_transistor
        if log_scale and lo <= 0:
            raise NetlistError(f"passive value {name}.{pname} needs a positive lower bound", line)
        integer = _is_integral(lo) and _is_integral(hi) and _is_integral(step)
        params.append(Param(name, pname, init, lo, hi, step, integer, log_scale))
        rest = rest[7:]

    expected = 2 if kind.is_transistor else 1
    if len(params) != expected:
        raise NetlistError(
            f"{kind.value} device {name} needs exactly {expected} PARAM clause(s), got {len(params)}", line
        )
    return Device(name, kind, tuple(terminals), tuple(params))


def parse_netlist(text: str) -> Netlist:
    """Parse netlist text into devices, supply/bias declarations and tunable parameters."""
    devices: list[Device] = []
    supplies: list[SupplyDef] = []
    ports: set[str] = set()
    seen: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        tokens = body.split()
        keyword = tokens[0].upper()
        if keyword == "DEVICE":
            dev = _parse_device(tokens, lineno)
            if dev.name in seen:
                raise NetlistError(f"duplicate name {dev.name!r}", lineno)
            seen.add(dev.name)
            devices.append(dev)
        elif keyword == "SUPPLY":
            if len(tokens) < 3:
                raise NetlistError("SUPPLY needs a name and a net", lineno)
            name, net = tokens[1], tokens[2]
            if name.upper() == "GND":
                if len(tokens) != 3:
                    raise NetlistError("SUPPLY GND takes only a net", lineno)
                kind, volts = "GND", 0.0
            else:
                if len(tokens) != 4:
                    raise NetlistError(f"SUPPLY {name} needs <net> <volts>", lineno)
                kind, volts = "SUPPLY", _parse_float(tokens[3], f"{name} voltage", lineno)
            if name in seen:
                raise NetlistError(f"duplicate name {name!r}", lineno)
            seen.add(name)
            supplies.append(SupplyDef(name, kind, net, volts))
        elif keyword == "BIAS":
            if len(tokens) != 4:
                raise NetlistError("BIAS needs <name> <net> <volts>", lineno)
            name = tokens[1]
            if name in seen:
                raise NetlistError(f"duplicate name {name!r}", lineno)
            seen.add(name)
            supplies.append(SupplyDef(name, "BIAS", tokens[2], _parse_float(tokens[3], f"{name} voltage", lineno)))
        elif keyword == "PORT":
            if len(tokens) < 2:
                raise NetlistError("PORT needs at least one net", lineno)
            ports.update(tokens[1:])
        else:
            raise NetlistError(f"unknown statement {tokens[0]!r}", lineno)

    if not devices:
        raise NetlistError("no devices")
    return Netlist(tuple(devices), tuple(supplies), frozenset(ports))


def load_netlist(path: str | Path) -> Netlist:
    return parse_netlist(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str
    nets: frozenset[str]
    param_indices: tuple[int, ...] = ()
    volts: float = 0.0

    @property
    def kind_onehot(self) -> np.ndarray:
        onehot = np.zeros(len(NODE_KINDS))
        onehot[NODE_KINDS.index(self.kind)] = 1.0
        return onehot


@dataclass(frozen=True)
class CircuitGraph:
    netlist: Netlist
    nodes: tuple[GraphNode, ...]
    adjacency: np.ndarray
    param_index: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_params(self) -> int:
        return len(self.param_index)


def build_graph(netlist: Netlist) -> CircuitGraph:
    """Devices first, then supplies; an edge joins every pair of nodes sharing a net."""
    # Each net must be touched twice or be declared as an external port.
    touches: dict[str, int] = {}
    for dev in netlist.devices:
        for net in set(dev.terminals):
            touches[net] = touches.get(net, 0) + 1
    for sup in netlist.supplies:
        touches[sup.net] = touches.get(sup.net, 0) + 1
    for dev in netlist.devices:
        for net in dev.terminals:
            if touches[net] < 2 and net not in netlist.ports:
                raise NetlistError(
                    f"device {dev.name} references undeclared net {net!r} "
                    "(connected nowhere else and not listed as a PORT)"
                )

    nodes: list[GraphNode] = []
    param_index: dict[tuple[int, int], int] = {}
    g = 0
    for dev in netlist.devices:
        idx = tuple(range(g, g + len(dev.params)))
        for slot, gi in enumerate(idx):
            param_index[(len(nodes), slot)] = gi
        nodes.append(GraphNode(dev.name, dev.kind.value, frozenset(dev.terminals), idx))
        g += len(dev.params)
    for sup in netlist.supplies:
        nodes.append(GraphNode(sup.name, sup.kind, frozenset([sup.net]), (), sup.volts))

    n = len(nodes)
    adj = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            if nodes[i].nets & nodes[j].nets:
                adj[i, j] = adj[j, i] = 1
    return CircuitGraph(netlist, tuple(nodes), adj, param_index)


def node_features(graph: CircuitGraph, params, supply_voltages: dict[str, float] | None = None) -> np.ndarray:
    """Feature matrix X with rows ``kind one-hot ++ zero-padded normalized parameters``.

    ``params`` may be a single length-M vector (returns n x F) or a B x M batch
    (returns B x n x F). Supply rows carry their voltage divided by the largest
    supply magnitude, ground carries 0.
    """
    params = np.asarray(params, dtype=float)
    m = graph.num_params
    if params.shape[-1] != m or params.ndim not in (1, 2):
        raise ValueError(f"expected {m} parameters, got shape {params.shape}")
    volts = graph.netlist.supply_voltages()
    if supply_voltages:
        volts.update(supply_voltages)
    vscale = max((abs(v) for v in volts.values()), default=0.0) or 1.0

    batch = params.reshape(-1, m)
    plist = graph.netlist.params
    normed = np.empty_like(batch)
    for k, p in enumerate(plist):
        normed[:, k] = p.normalize(batch[:, k])

    n = graph.num_nodes
    X = np.zeros((batch.shape[0], n, FEATURE_DIM))
    nk = len(NODE_KINDS)
    for i, node in enumerate(graph.nodes):
        X[:, i, NODE_KINDS.index(node.kind)] = 1.0
        if node.param_indices:
            for slot, gi in enumerate(node.param_indices):
                X[:, i, nk + slot] = normed[:, gi]
        else:
            X[:, i, nk] = volts.get(node.name, node.volts) / vscale
    return X[0] if params.ndim == 1 else X


def normalized_adjacency(graph_or_adj) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 of the adjacency with self-loops."""
    adj = graph_or_adj.adjacency if isinstance(graph_or_adj, CircuitGraph) else graph_or_adj
    a_hat = np.asarray(adj, dtype=float) + np.eye(len(adj))
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def to_dot(graph: CircuitGraph) -> str:
    """Graphviz description of the circuit graph."""
    lines = ["graph circuit {"]
    for node in graph.nodes:
        lines.append(f'  "{node.name}" [label="{node.name}\\n{node.kind}"];')
    n = graph.num_nodes
    for i in range(n):
        for j in range(i + 1, n):
            if graph.adjacency[i, j]:
                lines.append(f'  "{graph.nodes[i].name}" -- "{graph.nodes[j].name}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
