"""Vitality-driven network degradation.

Failing a component removes it; whatever part of a carrier network is then cut
off from that carrier's slack is dropped and its demand counts as fully shed.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from mesres.errors import ContractViolation
from mesres.model.network import Carrier, MultiEnergyNetwork, component_id

BROKEN, FUNCTIONAL, REPAIRED = 0, 1, 2


def reachable(root, edges) -> set:
    """Nodes reachable from ``root`` over undirected ``edges``."""
    adj = defaultdict(list)
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {root}
    queue = deque([root])
    while queue:
        a = queue.popleft()
        for b in adj[a]:
            if b not in seen:
                seen.add(b)
                queue.append(b)
    return seen


@dataclass(frozen=True)
class DegradedNetwork:
    """Active view of a network under a set of failed components."""

    base: MultiEnergyNetwork
    failed: frozenset
    buses: frozenset
    gas_junctions: frozenset
    heat_junctions: frozenset
    dropped_demands: tuple  # ((carrier, demand id), ...)

    def is_active(self, cid: str) -> bool:
        return cid in self._active_ids

    @property
    def _active_ids(self) -> frozenset:
        cached = self.__dict__.get("_active_cache")
        if cached is None:
            cached = frozenset(self._compute_active())
            object.__setattr__(self, "_active_cache", cached)
        return cached

    def _compute_active(self):
        net = self.base
        for cid, comp in net.iter_components():
            if cid in self.failed:
                continue
            kind = cid.split(".")[1] if not cid.startswith("cp.") else "cp"
            if kind == "line":
                ok = comp.from_bus in self.buses and comp.to_bus in self.buses
            elif kind == "gen":
                ok = comp.bus in self.buses
            elif cid.startswith("gas.pipe."):
                ok = comp.from_junction in self.gas_junctions and comp.to_junction in self.gas_junctions
            elif cid.startswith("gas.source."):
                ok = comp.junction in self.gas_junctions
            elif cid.startswith("heat.pipe."):
                ok = comp.from_junction in self.heat_junctions and comp.to_junction in self.heat_junctions
            elif cid.startswith("heat.producer."):
                ok = comp.junction in self.heat_junctions
            else:
                pools = {
                    Carrier.ELECTRICITY: self.buses,
                    Carrier.GAS: self.gas_junctions,
                    Carrier.HEAT: self.heat_junctions,
                }
                ok = all(comp.attachment(c) in pools[c] for c in comp.carriers())
            if ok:
                yield cid

    def dropped_ids(self, carrier: Carrier) -> tuple[str, ...]:
        return tuple(d for c, d in self.dropped_demands if c == carrier)

    def dropped_power(self) -> dict[Carrier, float]:
        demand = self.base.demand_power_mw()
        out = {c: 0.0 for c in Carrier}
        for c, d in self.dropped_demands:
            out[c] += demand[c][d]
        return out

    @property
    def healthy(self) -> bool:
        return not self.failed


def _as_failed_set(net: MultiEnergyNetwork, theta) -> frozenset:
    ids = net.component_ids
    if isinstance(theta, Mapping):
        missing = set(ids) - set(theta)
        if missing:
            raise ContractViolation(f"vitality vector misses {len(missing)} components, e.g. {sorted(missing)[:3]}")
        return frozenset(cid for cid in ids if theta[cid] == BROKEN)
    arr = np.asarray(theta)
    if arr.ndim != 1 or arr.shape[0] != len(ids):
        raise ContractViolation(f"vitality vector has length {arr.size}, network has {len(ids)} components")
    bad = ~np.isin(arr, (BROKEN, FUNCTIONAL, REPAIRED))
    if bad.any():
        raise ContractViolation(f"vitality states must be 0, 1 or 2, got {arr[bad][:3]}")
    return frozenset(ids[i] for i in np.flatnonzero(arr == BROKEN))


def apply_vitality(net: MultiEnergyNetwork, theta) -> DegradedNetwork:
    """Degrade ``net`` according to the vitality vector ``theta``.

    ``theta`` is either a sequence aligned with ``net.component_ids`` or a
    mapping from component id to state.
    """
    return degrade(net, _as_failed_set(net, theta))


def degrade(net: MultiEnergyNetwork, failed) -> DegradedNetwork:
    """Degrade ``net`` by an explicit set of failed component ids."""
    failed = frozenset(failed)
    unknown = failed - set(net.component_ids)
    if unknown:
        raise ContractViolation(f"unknown component ids {sorted(unknown)}")
    el, gas, heat = net.electricity, net.gas, net.heat

    buses = reachable(
        el.slack_bus,
        [(x.from_bus, x.to_bus) for x in el.lines if component_id("line", x.id) not in failed],
    )
    gas_js: set = set()
    if not gas.empty:
        gas_js = reachable(
            gas.slack_junction,
            [(p.from_junction, p.to_junction) for p in gas.pipes if component_id("gas_pipe", p.id) not in failed],
        )
    heat_js: set = set()
    if not heat.empty:
        heat_js = reachable(
            heat.slack_junction,
            [(p.from_junction, p.to_junction) for p in heat.pipes if component_id("water_pipe", p.id) not in failed],
        )

    dropped = [(Carrier.ELECTRICITY, d.id) for d in el.demands if d.bus not in buses]
    dropped += [(Carrier.GAS, d.id) for d in gas.demands if d.junction not in gas_js]
    dropped += [(Carrier.HEAT, d.id) for d in heat.demands if d.junction not in heat_js]
    return DegradedNetwork(
        base=net,
        failed=failed,
        buses=frozenset(buses),
        gas_junctions=frozenset(gas_js),
        heat_junctions=frozenset(heat_js),
        dropped_demands=tuple(dropped),
    )


def healthy(net: MultiEnergyNetwork) -> DegradedNetwork:
    return degrade(net, ())
