"""Synthetic multi-energy networks grown along an electricity grid.

Gas and heat networks reuse the topology of the power grid: a seeded
permutation of the non-slack buses decides which buses become productive
(demand) nodes, and each productive node is connected to the carrier's root
along the power grid's breadth-first tree.  Taking a prefix of one fixed
permutation makes node sets nested across deployment densities, and coupling
points are placed by cycling through a fixed permutation of their candidate
sites, so the coupling points at a lower density are always a subset of those
at a higher one.
"""

from __future__ import annotations

import dataclasses
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from mesres.bounds import OperationalBounds
from mesres.errors import GenerationError, MesError, PlacementError
from mesres.model.network import (
    Bus,
    Carrier,
    CouplingPoint,
    CPKind,
    ElectricDemand,
    ElectricityNetwork,
    GasConstants,
    GasDemand,
    GasNetwork,
    GasPipe,
    GasSource,
    Generator,
    HeatDemand,
    HeatNetwork,
    HeatProducer,
    Line,
    MultiEnergyNetwork,
    WaterConstants,
    WaterPipe,
)

STANDARD_DIAMETERS = (0.05, 0.065, 0.08, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class SynthParameters:
    """Physical defaults of generated networks, kept in one place for recalibration."""

    # demand of a productive node relative to the bus's electric load
    gas_demand_ratio: float = 1.0
    heat_demand_ratio: float = 0.8
    # pipe sizing: smallest standard diameter keeping the velocity below the
    # limit at ``margin`` times the nominal downstream flow
    gas_velocity_max: float = 2.5
    gas_sizing_margin: float = 2.0
    gas_roughness_m: float = 1e-4
    heat_velocity_max: float = 1.5
    heat_sizing_margin: float = 1.5
    heat_roughness_m: float = 1e-4
    heat_insulation_k: float = 0.005
    # distributed gas injection (e.g. biomethane): share of productive nodes that
    # host a source, share of total gas demand they cover nominally, headroom
    gas_source_fraction: float = 0.3
    gas_source_share: float = 0.3
    gas_source_headroom: float = 3.0
    # local heat producers, sized relative to the demand downstream of their site
    heat_producer_fraction: float = 0.3
    heat_producer_share: float = 0.12
    # coupling points
    chp_eta_el: float = 0.3
    chp_eta_heat: float = 0.55
    chp_rating_mw_el: float = 0.15
    p2h_eta: float = 0.95
    p2h_rating_mw: float = 0.15
    p2g_eta_gas: float = 0.6
    p2g_rating_mw: float = 0.1
    # per-component fragility is drawn from [1 - spread, 1 + spread]
    fragility_spread: float = 0.5


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    gas_density: float = 0.5
    heat_density: float = 0.4
    cp_density: dict = field(default_factory=lambda: {"CHP": 1.0, "P2H": 1.0, "P2G": 1.0})
    params: SynthParameters = field(default_factory=SynthParameters)

    def __post_init__(self):
        for name in ("gas_density", "heat_density"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise GenerationError(f"{name} must lie in (0, 1], got {v}")
        for kind, v in self.cp_density.items():
            CPKind(kind)
            if v < 0:
                raise GenerationError(f"coupling point density for {kind} must be nonnegative, got {v}")

    @classmethod
    def with_density(cls, rho: float, **kwargs) -> "SynthConfig":
        return cls(cp_density={k.value: float(rho) for k in CPKind}, **kwargs)

    def density(self, kind: CPKind) -> float:
        return float(self.cp_density.get(kind.value, 0.0))


# --------------------------------------------------------------------------- base grid

_OVERHEAD = dict(r_ohm_per_km=0.306, x_ohm_per_km=0.355, b_us_per_km=3.1)

_RURAL_COORDS = {
    0: (0.0, 0.0), 1: (2.0, 0.5), 2: (4.0, 0.5), 3: (6.0, 0.0), 4: (8.0, 0.0), 5: (10.0, -0.5),
    6: (4.5, 2.5), 7: (5.0, 4.5), 8: (12.0, -1.0), 9: (13.0, -2.5),
    10: (1.0, -2.5), 11: (3.0, -3.5), 12: (5.0, -4.0), 13: (7.0, -4.0), 14: (9.0, -4.5),
    15: (3.5, -6.0), 16: (4.0, -8.0), 17: (10.5, -5.0), 18: (12.0, -5.0), 19: (13.5, -4.5),
}
_RURAL_LINES = [
    (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (2, 6), (6, 7), (5, 8), (8, 9),
    (0, 10), (10, 11), (11, 12), (12, 13), (13, 14), (11, 15), (15, 16), (14, 17), (17, 18), (18, 19),
    (9, 19),
]
_RURAL_GENERATORS = {4: 0.30, 7: 0.20, 9: 0.25, 13: 0.30, 16: 0.20, 18: 0.25}


def rural_mv_grid(rating_factor: float = 1.7, min_rating_ka: float = 0.01, seed: int = 7) -> ElectricityNetwork:
    """A 20-bus, 20 kV rural feeder pair closed into a ring by one tie line.

    Loads of 0.1 to 0.4 MW at power factor 0.95 sit on every non-slack bus and
    six distributed generators feed in 1.5 MW.  Line current ratings are set to
    ``rating_factor`` times the healthy-state current so that rerouting after a
    line outage can overload the remaining path.
    """
    from mesres.flow.solver import solve_multi_energy_flow

    rng = np.random.default_rng(seed)
    tan_phi = np.tan(np.arccos(0.95))
    buses = tuple(Bus(i, 20.0, *_RURAL_COORDS[i]) for i in range(20))
    loads = np.round(rng.uniform(0.1, 0.4, size=19), 3)
    demands = tuple(
        ElectricDemand(f"D{b}", b, float(p), float(round(p * tan_phi, 4))) for b, p in zip(range(1, 20), loads)
    )
    gens = tuple(Generator(f"G{b}", b, p, p) for b, p in _RURAL_GENERATORS.items())
    lines = []
    for k, (a, b) in enumerate(_RURAL_LINES):
        (xa, ya), (xb, yb) = _RURAL_COORDS[a], _RURAL_COORDS[b]
        length = round(1.1 * float(np.hypot(xa - xb, ya - yb)), 3)
        lines.append(
            Line(
                f"L{k}", a, b,
                r_ohm=round(_OVERHEAD["r_ohm_per_km"] * length, 5),
                x_ohm=round(_OVERHEAD["x_ohm_per_km"] * length, 5),
                b_us=round(_OVERHEAD["b_us_per_km"] * length, 5),
                max_i_ka=1.0,
                length_km=length,
            )
        )
    grid = ElectricityNetwork(buses=buses, lines=tuple(lines), slack_bus=0, generators=gens, demands=demands)
    state = solve_multi_energy_flow(MultiEnergyNetwork(grid, name="rural-mv"))
    ibase = grid.base_mva / (np.sqrt(3) * 20.0)
    current = np.maximum(
        np.hypot(state.p_from_mw, state.q_from_mvar) / state.vm_pu[[ln.from_bus for ln in lines]],
        np.hypot(state.p_to_mw, state.q_to_mvar) / state.vm_pu[[ln.to_bus for ln in lines]],
    ) * ibase / grid.base_mva
    rated = tuple(
        dataclasses.replace(ln, max_i_ka=round(max(rating_factor * i, min_rating_ka), 4))
        for ln, i in zip(lines, current)
    )
    return dataclasses.replace(grid, lines=rated)


# --------------------------------------------------------------------------- carrier derivation


def _adjacency(el: ElectricityNetwork):
    adj = {b.id: [] for b in el.buses}
    for ln in el.lines:
        adj[ln.from_bus].append((ln.to_bus, ln))
        adj[ln.to_bus].append((ln.from_bus, ln))
    for v in adj.values():
        v.sort(key=lambda t: (t[0], t[1].id))
    return adj


def bfs_tree(el: ElectricityNetwork) -> dict:
    """Parent map ``bus -> (parent bus, line)`` of the hop-count BFS tree from the slack."""
    adj = _adjacency(el)
    parent = {}
    seen = {el.slack_bus}
    queue = deque([el.slack_bus])
    while queue:
        a = queue.popleft()
        for b, ln in adj[a]:
            if b not in seen:
                seen.add(b)
                parent[b] = (a, ln)
                queue.append(b)
    if len(seen) != len(el.buses):
        raise GenerationError("base electricity grid is not connected")
    return parent


def productive_order(el: ElectricityNetwork, carrier: Carrier, seed: int) -> list[int]:
    """Fixed permutation of non-slack buses; density selects a prefix of it."""
    candidates = sorted(b.id for b in el.buses if b.id != el.slack_bus)
    rng = np.random.default_rng([seed, int(carrier)])
    return [candidates[i] for i in rng.permutation(len(candidates))]


def productive_nodes(el: ElectricityNetwork, carrier: Carrier, density: float, seed: int) -> list[int]:
    order = productive_order(el, carrier, seed)
    k = int(round(density * len(order)))
    if k == 0:
        raise GenerationError(f"{carrier.short} deployment density {density} selects no productive node")
    return order[:k]


def _pick_diameter(mass_flow, density, v_max):
    for d in STANDARD_DIAMETERS:
        if mass_flow <= density * v_max * np.pi * d**2 / 4:
            return d
    return STANDARD_DIAMETERS[-1]


def _downstream(parent: dict, nodes: set, load: dict) -> dict:
    """Sum of ``load`` in the subtree below each node of the tree restricted to ``nodes``."""
    depth = {}
    for b in nodes:
        d, x = 0, b
        while x in parent:
            x = parent[x][0]
            d += 1
        depth[b] = d
    acc = {b: load.get(b, 0.0) for b in nodes}
    for b in sorted(nodes, key=lambda n: -depth[n]):
        if b in parent and parent[b][0] in acc:
            acc[parent[b][0]] += acc[b]
    return acc


def _path_union(parent: dict, root: int, selected) -> set:
    nodes = {root}
    for b in selected:
        x = b
        while x not in nodes:
            nodes.add(x)
            x = parent[x][0]
    return nodes


def derive_carrier_network(base: ElectricityNetwork, carrier: Carrier, cfg: SynthConfig):
    """Gas or heat network grown along ``base`` at the configured deployment density."""
    carrier = Carrier(carrier)
    if carrier is Carrier.ELECTRICITY:
        raise GenerationError("the electricity network is the base, not a derived carrier")
    prm = cfg.params
    density = cfg.gas_density if carrier is Carrier.GAS else cfg.heat_density
    parent = bfs_tree(base)
    selected = productive_nodes(base, carrier, density, cfg.seed)
    root = base.slack_bus
    nodes = _path_union(parent, root, selected)
    el_load = {d.bus: 0.0 for d in base.demands}
    for d in base.demands:
        el_load[d.bus] += d.p_mw
    tree_lines = {parent[b][1].id for b in nodes if b != root}

    if carrier is Carrier.GAS:
        consts = GasConstants()
        uh = 3.6 * consts.hhv_kwh_per_kg
        dem_mw = {b: prm.gas_demand_ratio * el_load.get(b, 0.0) for b in selected}
        dem_mw = {b: v for b, v in dem_mw.items() if v > 0}
        demands = tuple(GasDemand(f"GD{b}", b, round(v / uh, 7)) for b, v in sorted(dem_mw.items()))
        total = sum(d.mass_flow_kg_s for d in demands)
        n_src = max(1, int(round(prm.gas_source_fraction * len(selected))))
        src_nodes = sorted(selected[-n_src:])
        nominal = prm.gas_source_share * total / n_src
        sources = tuple(
            GasSource(f"GS{b}", b, round(nominal, 7), round(prm.gas_source_headroom * nominal, 7))
            for b in src_nodes
        )
        gas_rho = 4.0e5 * consts.molar_mass / (consts.compressibility * consts.gas_constant * consts.temperature_k)
        flow = _downstream(parent, nodes, {d.junction: d.mass_flow_kg_s for d in demands})
        pipes = []
        for ln in base.lines:
            if ln.from_bus in nodes and ln.to_bus in nodes:
                if ln.id in tree_lines:
                    child = ln.to_bus if parent.get(ln.to_bus, (None,))[0] == ln.from_bus else ln.from_bus
                    up = parent[child][0]
                    m = flow[child]
                else:
                    up, child = ln.from_bus, ln.to_bus
                    m = 0.0
                d = _pick_diameter(prm.gas_sizing_margin * m, gas_rho, prm.gas_velocity_max)
                pipes.append(GasPipe(f"GP{ln.id}", up, child, round(1000 * ln.length_km, 3), d, prm.gas_roughness_m))
        return GasNetwork(
            junctions=tuple(sorted(nodes)),
            pipes=tuple(pipes),
            slack_junction=root,
            sources=sources,
            demands=demands,
            constants=consts,
        )

    consts = WaterConstants()
    heat = HeatNetwork()
    dem = {b: round(prm.heat_demand_ratio * el_load.get(b, 0.0), 5) for b in selected}
    dem = {b: v for b, v in dem.items() if v > 0}
    demands = tuple(HeatDemand(f"HD{b}", b, v) for b, v in sorted(dem.items()))
    down = _downstream(parent, nodes, dem)
    dT = heat.supply_temperature_k - consts.t_return_k
    pipes = []
    for b in sorted(nodes - {root}):
        up, ln = parent[b]
        m = prm.heat_sizing_margin * down[b] * 1e6 / (consts.heat_capacity * dT)
        d = _pick_diameter(m, consts.density, prm.heat_velocity_max)
        pipes.append(
            WaterPipe(f"HP{ln.id}", up, b, round(1000 * ln.length_km, 3), d, prm.heat_insulation_k, prm.heat_roughness_m)
        )
    n_prod = max(1, int(round(prm.heat_producer_fraction * len(selected))))
    sites = [b for b in selected if b != root][:n_prod]
    producers = tuple(
        HeatProducer(f"HS{b}", b, round(prm.heat_producer_share * down[b], 5)) for b in sorted(sites)
    )
    return HeatNetwork(
        junctions=tuple(sorted(nodes)),
        pipes=tuple(pipes),
        slack_junction=root,
        producers=producers,
        demands=demands,
        constants=consts,
    )


# --------------------------------------------------------------------------- coupling points


_KIND_STREAM = {CPKind.CHP: 101, CPKind.P2H: 102, CPKind.P2G: 103}


def _candidates(mes: MultiEnergyNetwork, kind: CPKind) -> tuple[list[int], int]:
    """Candidate sites and the reference count the density multiplies."""
    heat_sites = sorted({d.junction for d in mes.heat.demands})
    gas_sites = sorted({d.junction for d in mes.gas.demands})
    gas_js = set(mes.gas.junctions)
    if kind is CPKind.CHP:
        return [b for b in heat_sites if b in gas_js], len(heat_sites)
    if kind is CPKind.P2H:
        return heat_sites, len(heat_sites)
    return gas_sites, len(gas_sites)


def place_coupling_points(mes: MultiEnergyNetwork, cfg: SynthConfig) -> MultiEnergyNetwork:
    """Add coupling points of every kind in proportion to the configured densities."""
    prm = cfg.params
    uh = mes.unit_factor * mes.gas.constants.hhv_kwh_per_kg
    cps = []
    for kind in CPKind:
        rho = cfg.density(kind)
        sites, ref = _candidates(mes, kind)
        count = int(round(rho * ref))
        if count == 0:
            continue
        if not sites:
            raise PlacementError(f"{count} {kind.value} requested but no co-located candidate site exists")
        rng = np.random.default_rng([cfg.seed, _KIND_STREAM[kind]])
        order = [sites[i] for i in rng.permutation(len(sites))]
        for i in range(count):
            b = order[i % len(order)]
            if kind is CPKind.CHP:
                cp = CouplingPoint(
                    f"CHP{i}", kind, round(prm.chp_rating_mw_el / (prm.chp_eta_el * uh), 7),
                    el_bus=b, gas_junction=b, heat_junction=b,
                    eta_el=prm.chp_eta_el, eta_heat=prm.chp_eta_heat,
                )
            elif kind is CPKind.P2H:
                cp = CouplingPoint(f"P2H{i}", kind, prm.p2h_rating_mw, el_bus=b, heat_junction=b, eta_el=prm.p2h_eta)
            else:
                cp = CouplingPoint(f"P2G{i}", kind, prm.p2g_rating_mw, el_bus=b, gas_junction=b, eta_gas=prm.p2g_eta_gas)
            cps.append(cp)
    return mes.replace(coupling_points=tuple(cps))


def assign_fragility(mes: MultiEnergyNetwork, seed: int, spread: float) -> MultiEnergyNetwork:
    """Per-component fragility drawn from a stream keyed by the component id.

    Keying by id keeps every component's value independent of which other
    components exist, so networks at different densities agree on shared parts.
    """
    if spread == 0:
        return mes

    def gamma(cid):
        u = np.random.default_rng([seed, 7, zlib.crc32(cid.encode())]).random()
        return round(1.0 - spread + 2.0 * spread * u, 6)

    el, gas, heat = mes.electricity, mes.gas, mes.heat
    rep = dataclasses.replace
    el = rep(
        el,
        lines=tuple(rep(x, fragility=gamma(f"el.line.{x.id}")) for x in el.lines),
        generators=tuple(rep(x, fragility=gamma(f"el.gen.{x.id}")) for x in el.generators),
    )
    gas = rep(
        gas,
        pipes=tuple(rep(x, fragility=gamma(f"gas.pipe.{x.id}")) for x in gas.pipes),
        sources=tuple(rep(x, fragility=gamma(f"gas.source.{x.id}")) for x in gas.sources),
    )
    heat = rep(
        heat,
        pipes=tuple(rep(x, fragility=gamma(f"heat.pipe.{x.id}")) for x in heat.pipes),
        producers=tuple(rep(x, fragility=gamma(f"heat.producer.{x.id}")) for x in heat.producers),
    )
    cps = tuple(rep(x, fragility=gamma(f"cp.{x.id}")) for x in mes.coupling_points)
    return rep(mes, electricity=el, gas=gas, heat=heat, coupling_points=cps)


def check_base_feasibility(mes: MultiEnergyNetwork, bounds: OperationalBounds | None = None):
    """Solve the healthy network and verify it respects the operational bounds."""
    from mesres.flow.solver import solve_multi_energy_flow

    bounds = bounds or OperationalBounds()
    try:
        state = solve_multi_energy_flow(mes)
    except MesError as exc:
        raise GenerationError(f"base flow of {mes.name} does not solve: {exc}") from exc
    problems = []
    tol = bounds.tol
    if state.vm_pu.size and (state.vm_pu.min() < bounds.v_min - tol or state.vm_pu.max() > bounds.v_max + tol):
        problems.append(f"voltage range [{state.vm_pu.min():.4f}, {state.vm_pu.max():.4f}]")
    if state.loading_percent.size and state.loading_percent.max() > bounds.lp_max + tol:
        problems.append(f"line loading {state.loading_percent.max():.1f} %")
    if state.pressure_pa.size:
        lo, hi = bounds.pressure_limits(mes.gas.slack_pressure_pa)
        if state.pressure_pa.min() < lo * (1 - tol) or state.pressure_pa.max() > hi * (1 + tol):
            problems.append(f"gas pressure range [{state.pressure_pa.min():.0f}, {state.pressure_pa.max():.0f}] Pa")
    if state.temperature_k.size:
        if state.temperature_k.min() < bounds.t_min - tol or state.temperature_k.max() > bounds.t_max + tol:
            problems.append(
                f"temperature range [{state.temperature_k.min():.2f}, {state.temperature_k.max():.2f}] K"
            )
    if state.slack_p_mw < 0:
        problems.append("electricity slack exports power in the base state")
    if problems:
        raise GenerationError(f"base state of {mes.name} violates operational bounds: " + "; ".join(problems))
    return state


def generate_mes(base: ElectricityNetwork, cfg: SynthConfig, name: str | None = None, verify: bool = True):
    """Derive gas and heat networks, place coupling points and check the base flow."""
    gas = derive_carrier_network(base, Carrier.GAS, cfg)
    heat = derive_carrier_network(base, Carrier.HEAT, cfg)
    label = name or "mes-" + "-".join(f"{k}{v:g}" for k, v in sorted(cfg.cp_density.items()))
    mes = MultiEnergyNetwork(electricity=base, gas=gas, heat=heat, name=label)
    mes = place_coupling_points(mes, cfg)
    mes = assign_fragility(mes, cfg.seed, cfg.params.fragility_spread).validate()
    if verify:
        check_base_feasibility(mes)
    return mes
