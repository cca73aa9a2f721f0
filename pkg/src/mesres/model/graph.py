"""Directed weighted multigraph view of a multi-energy network.

Nodes are ``(unit id, carrier)`` pairs.  Every line or pipe gives two opposite
edges with the same weight; every coupling-point leg gives one edge from its
input to its output carrier weighted ``1 - eta``.  Physical edge weights are
relative losses taken from a solved healthy state and frozen afterwards.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from mesres.errors import (
    ContractViolation,
    DegenerateFlowError,
    OrientationError,
    StructuralError,
    ZeroGradientError,
)
from mesres.model.network import Carrier, MultiEnergyNetwork, component_id


class EdgeType(enum.Enum):
    LINE = "Line"
    GAS_PIPE = "GasPipe"
    WATER_PIPE = "WaterPipe"
    COUPLING = "CouplingBranch"


# --------------------------------------------------------------------------- weights


def edge_weight_power(p_in, p_out) -> float:
    """Relative active-power loss of a branch."""
    if not p_in > 0:
        raise DegenerateFlowError(f"branch input power must be positive, got {p_in}")
    if p_out < 0 or p_out > p_in:
        raise ContractViolation(f"output power {p_out} outside [0, {p_in}]")
    return (p_in - p_out) / p_in


def edge_weight_gas(p_i, p_j) -> float:
    """Relative pressure drop from upstream ``p_i`` to downstream ``p_j``."""
    if not p_i > 0:
        raise ContractViolation(f"upstream pressure must be positive, got {p_i}")
    if p_j > p_i:
        raise OrientationError(f"downstream pressure {p_j} exceeds upstream {p_i}; flip the edge")
    return (p_i - p_j) / p_i


def edge_weight_heat(h_loss, volume, heat_capacity, t_in, t_out, density) -> float:
    """Heat loss relative to the heat content change of the water in the pipe.

    The water volume is converted to mass with ``density`` so the ratio is
    dimensionless.
    """
    if volume <= 0 or heat_capacity <= 0:
        raise ContractViolation("pipe volume and heat capacity must be positive")
    if t_in == t_out:
        raise ZeroGradientError("inlet and outlet temperature are equal")
    return abs(h_loss) / (volume * density * heat_capacity * abs(t_in - t_out))


# --------------------------------------------------------------------------- graph


@dataclass(frozen=True)
class Edge:
    source: tuple
    target: tuple
    key: int
    edge_type: EdgeType
    weight: float
    component: str  # owning component id


@dataclass
class WeightedMultigraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    #: demands, generators, sources and producers attached to each node
    attached: dict = field(default_factory=dict)

    def index(self) -> dict:
        return {n: i for i, n in enumerate(self.nodes)}

    def carrier_counts(self) -> dict:
        out = {c: 0 for c in Carrier}
        for _, c in self.nodes:
            out[c] += 1
        return out

    def out_edges(self, node):
        return [e for e in self.edges if e.source == node]

    def to_dict(self) -> dict:
        return {
            "nodes": [{"unit": u, "carrier": c.short, "attached": self.attached.get((u, c), [])} for u, c in self.nodes],
            "edges": [
                {
                    "source": [e.source[0], e.source[1].short],
                    "target": [e.target[0], e.target[1].short],
                    "key": e.key,
                    "type": e.edge_type.value,
                    "weight": e.weight,
                    "component": e.component,
                }
                for e in self.edges
            ],
        }


#: weight assigned when a physical weight is undefined (zero flow or no gradient)
WEIGHT_FLOOR = 1e-9


def physical_weights(net: MultiEnergyNetwork, state) -> dict:
    """Weight per line/pipe component id from a solved healthy state."""
    w = {}
    for lid, pf, pt in zip(state.line_ids, state.p_from_mw, state.p_to_mw):
        p_in, p_out = (pf, -pt) if pf >= -pt else (pt, -pf)
        try:
            val = edge_weight_power(p_in, min(max(p_out, 0.0), p_in))
        except DegenerateFlowError:
            val = 0.0
        w[component_id("line", lid)] = val
    pj = dict(zip(state.gas_junction_ids, state.pressure_pa))
    pipes = {p.id: p for p in net.gas.pipes}
    for pid in state.gas_pipe_ids:
        p = pipes[pid]
        a, b = pj[p.from_junction], pj[p.to_junction]
        w[component_id("gas_pipe", pid)] = edge_weight_gas(max(a, b), min(a, b))
    wp = {p.id: p for p in net.heat.pipes}
    rho, cap = net.heat.constants.density, net.heat.constants.heat_capacity
    for pid, loss, ta, tb in zip(state.heat_pipe_ids, state.heat_loss_w, state.heat_t_from_k, state.heat_t_to_k):
        p = wp[pid]
        volume = np.pi * p.d_in**2 / 4 * p.length_m
        try:
            val = edge_weight_heat(loss, volume, cap, ta, tb, rho)
        except ZeroGradientError:
            val = WEIGHT_FLOOR
        w[component_id("water_pipe", pid)] = val
    return w


def build_topology_graph(net: MultiEnergyNetwork, weights: dict | None = None, state=None) -> WeightedMultigraph:
    """Multigraph of ``net``.

    Physical weights come from ``weights`` (component id -> weight), else from
    ``state``, else from a fresh healthy flow solve.  Weights are clipped to
    ``[0, 1]``.
    """
    net.validate()
    if weights is None:
        if state is None:
            from mesres.flow.solver import solve_multi_energy_flow

            state = solve_multi_energy_flow(net)
        weights = physical_weights(net, state)

    g = WeightedMultigraph()
    el, gas, heat = net.electricity, net.gas, net.heat
    for b in el.buses:
        g.nodes.append((b.id, Carrier.ELECTRICITY))
    for j in gas.junctions:
        g.nodes.append((j, Carrier.GAS))
    for j in heat.junctions:
        g.nodes.append((j, Carrier.HEAT))
    nodes = set(g.nodes)

    def attach(node, label):
        g.attached.setdefault(node, []).append(label)

    for d in el.demands:
        attach((d.bus, Carrier.ELECTRICITY), f"demand:{d.id}")
    for x in el.generators:
        attach((x.bus, Carrier.ELECTRICITY), component_id("generator", x.id))
    for d in gas.demands:
        attach((d.junction, Carrier.GAS), f"demand:{d.id}")
    for x in gas.sources:
        attach((x.junction, Carrier.GAS), component_id("gas_source", x.id))
    for d in heat.demands:
        attach((d.junction, Carrier.HEAT), f"demand:{d.id}")
    for x in heat.producers:
        attach((x.junction, Carrier.HEAT), component_id("heat_producer", x.id))

    key = 0

    def add(u, v, et, w, cid):
        nonlocal key
        for n in (u, v):
            if n not in nodes:
                raise StructuralError(f"{cid} has dangling attachment {n[0]} in {n[1].short}")
        g.edges.append(Edge(u, v, key, et, float(min(max(w, 0.0), 1.0)), cid))
        key += 1

    for items, carrier, et, kind in (
        (el.lines, Carrier.ELECTRICITY, EdgeType.LINE, "line"),
        (gas.pipes, Carrier.GAS, EdgeType.GAS_PIPE, "gas_pipe"),
        (heat.pipes, Carrier.HEAT, EdgeType.WATER_PIPE, "water_pipe"),
    ):
        for x in items:
            cid = component_id(kind, x.id)
            a = x.from_bus if kind == "line" else x.from_junction
            b = x.to_bus if kind == "line" else x.to_junction
            w = weights.get(cid, 0.0)
            add((a, carrier), (b, carrier), et, w, cid)
            add((b, carrier), (a, carrier), et, w, cid)
    for cp in net.coupling_points:
        cid = component_id("cp", cp.id)
        for src, dst, eta in cp.legs():
            add((cp.attachment(src), src), (cp.attachment(dst), dst), EdgeType.COUPLING, 1.0 - eta, cid)
    return g
