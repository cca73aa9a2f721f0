"""Multi-energy network data model and its JSON interchange format.

A network consists of an electricity, a gas and a heat subnetwork plus a list
of coupling points.  Buses and junctions are identified by an integer *unit id*
shared across carriers: gas junction 5 and bus 5 are co-located.  Every
failable element (lines, pipes, generators, sources, producers, coupling
points) has a stable string component id, see :func:`component_id`.

Units: powers in MW/Mvar, gas mass flows in kg/s, pressures in Pa,
temperatures in K, lengths in m (line lengths in km), HHV in kWh/kg.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from mesres.errors import StructuralError

SCHEMA_VERSION = 1

#: 3.6 converts kg/s * kWh/kg into MW
DEFAULT_UNIT_FACTOR = 3.6


class Carrier(enum.IntEnum):
    ELECTRICITY = 0
    GAS = 1
    HEAT = 2

    @property
    def short(self) -> str:
        return _CARRIER_SHORT[self]

    @classmethod
    def parse(cls, value) -> "Carrier":
        if isinstance(value, Carrier):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().lower()
        for c, s in _CARRIER_SHORT.items():
            if key in (s, c.name.lower()):
                return c
        if key in ("heating", "water"):
            return cls.HEAT
        raise ValueError(f"unknown carrier {value!r}")


_CARRIER_SHORT = {Carrier.ELECTRICITY: "el", Carrier.GAS: "gas", Carrier.HEAT: "heat"}
CARRIERS = tuple(Carrier)


class CPKind(str, enum.Enum):
    CHP = "CHP"
    P2H = "P2H"
    P2G = "P2G"


# --------------------------------------------------------------------------- electricity


@dataclass(frozen=True)
class Bus:
    id: int
    vn_kv: float = 20.0
    x: float = 0.0
    y: float = 0.0


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float
    max_i_ka: float
    b_us: float = 0.0  # total charging susceptance in microsiemens
    tap: float = 1.0
    shift_deg: float = 0.0
    length_km: float = 1.0
    fragility: float = 1.0


@dataclass(frozen=True)
class Generator:
    id: str
    bus: int
    p_mw: float
    p_max_mw: float | None = None
    fragility: float = 1.0

    @property
    def rating_mw(self) -> float:
        return self.p_mw if self.p_max_mw is None else self.p_max_mw


@dataclass(frozen=True)
class ElectricDemand:
    id: str
    bus: int
    p_mw: float
    q_mvar: float = 0.0


@dataclass(frozen=True)
class Shunt:
    id: str
    bus: int
    g_mw: float = 0.0
    b_mvar: float = 0.0


@dataclass(frozen=True)
class ElectricityNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_bus: int
    generators: tuple[Generator, ...] = ()
    demands: tuple[ElectricDemand, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    base_mva: float = 1.0
    slack_vm_pu: float = 1.0
    slack_max_import_mw: float | None = None

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)


# --------------------------------------------------------------------------- gas


@dataclass(frozen=True)
class GasConstants:
    compressibility: float = 0.9
    gas_constant: float = 8.314
    temperature_k: float = 288.15
    molar_mass: float = 0.0175
    viscosity: float = 1.1e-5
    hhv_kwh_per_kg: float = 15.3

    @property
    def gamma_sq(self) -> float:
        """Gamma^2 = Z R T / m in m^2/s^2."""
        return self.compressibility * self.gas_constant * self.temperature_k / self.molar_mass


@dataclass(frozen=True)
class GasPipe:
    id: str
    from_junction: int
    to_junction: int
    length_m: float
    diameter_m: float
    roughness_m: float = 1e-4
    inner_diameter_m: float | None = None
    fragility: float = 1.0

    @property
    def d_in(self) -> float:
        return self.diameter_m if self.inner_diameter_m is None else self.inner_diameter_m


@dataclass(frozen=True)
class GasSource:
    id: str
    junction: int
    mass_flow_kg_s: float
    max_mass_flow_kg_s: float | None = None
    fragility: float = 1.0

    @property
    def rating(self) -> float:
        return self.mass_flow_kg_s if self.max_mass_flow_kg_s is None else self.max_mass_flow_kg_s


@dataclass(frozen=True)
class GasDemand:
    id: str
    junction: int
    mass_flow_kg_s: float


@dataclass(frozen=True)
class GasNetwork:
    junctions: tuple[int, ...] = ()
    pipes: tuple[GasPipe, ...] = ()
    slack_junction: int | None = None
    slack_pressure_pa: float = 4.0e5
    sources: tuple[GasSource, ...] = ()
    demands: tuple[GasDemand, ...] = ()
    constants: GasConstants = field(default_factory=GasConstants)
    slack_max_import_kg_s: float | None = None

    @property
    def empty(self) -> bool:
        return not self.junctions


# --------------------------------------------------------------------------- heat


@dataclass(frozen=True)
class WaterConstants:
    density: float = 983.0
    heat_capacity: float = 4186.0
    viscosity: float = 4.7e-4
    t_return_k: float = 313.15
    t_ext_k: float = 283.15


@dataclass(frozen=True)
class WaterPipe:
    id: str
    from_junction: int
    to_junction: int
    length_m: float
    diameter_m: float
    insulation_k: float = 0.01
    roughness_m: float = 1e-4
    inner_diameter_m: float | None = None
    t_ext_k: float | None = None
    fragility: float = 1.0

    @property
    def d_in(self) -> float:
        return self.diameter_m if self.inner_diameter_m is None else self.inner_diameter_m


@dataclass(frozen=True)
class HeatProducer:
    id: str
    junction: int
    h_mw: float
    h_max_mw: float | None = None
    fragility: float = 1.0

    @property
    def rating_mw(self) -> float:
        return self.h_mw if self.h_max_mw is None else self.h_max_mw


@dataclass(frozen=True)
class HeatDemand:
    id: str
    junction: int
    h_mw: float


@dataclass(frozen=True)
class HeatNetwork:
    junctions: tuple[int, ...] = ()
    pipes: tuple[WaterPipe, ...] = ()
    slack_junction: int | None = None
    supply_temperature_k: float = 343.15
    slack_pressure_pa: float = 6.0e5
    producers: tuple[HeatProducer, ...] = ()
    demands: tuple[HeatDemand, ...] = ()
    constants: WaterConstants = field(default_factory=WaterConstants)
    slack_max_supply_mw: float | None = None

    @property
    def empty(self) -> bool:
        return not self.junctions


# --------------------------------------------------------------------------- coupling


@dataclass(frozen=True)
class CouplingPoint:
    """Energy conversion unit.

    ``rating`` is the maximum input: gas kg/s for a CHP, electric MW for P2H
    and P2G.  ``dispatch`` is the nominal input used by a plain flow solve.
    """

    id: str
    kind: CPKind
    rating: float
    el_bus: int | None = None
    gas_junction: int | None = None
    heat_junction: int | None = None
    eta_el: float = 0.0
    eta_heat: float = 0.0
    eta_gas: float = 0.0
    dispatch: float = 0.0
    fragility: float = 1.0

    def carriers(self) -> tuple[Carrier, ...]:
        return {
            CPKind.CHP: (Carrier.GAS, Carrier.ELECTRICITY, Carrier.HEAT),
            CPKind.P2H: (Carrier.ELECTRICITY, Carrier.HEAT),
            CPKind.P2G: (Carrier.ELECTRICITY, Carrier.GAS),
        }[self.kind]

    def attachment(self, carrier: Carrier) -> int | None:
        return {
            Carrier.ELECTRICITY: self.el_bus,
            Carrier.GAS: self.gas_junction,
            Carrier.HEAT: self.heat_junction,
        }[carrier]

    def legs(self) -> list[tuple[Carrier, Carrier, float]]:
        """Directed conversion legs ``(from, to, efficiency)``."""
        if self.kind is CPKind.CHP:
            return [
                (Carrier.GAS, Carrier.ELECTRICITY, self.eta_el),
                (Carrier.GAS, Carrier.HEAT, self.eta_heat),
            ]
        if self.kind is CPKind.P2H:
            return [(Carrier.ELECTRICITY, Carrier.HEAT, self.eta_el)]
        return [(Carrier.ELECTRICITY, Carrier.GAS, self.eta_gas)]


# --------------------------------------------------------------------------- component ids

_KIND_PREFIX = {
    "line": "el.line.",
    "generator": "el.gen.",
    "gas_pipe": "gas.pipe.",
    "gas_source": "gas.source.",
    "water_pipe": "heat.pipe.",
    "heat_producer": "heat.producer.",
    "cp": "cp.",
}


def component_id(kind: str, element_id: str) -> str:
    """Stable identifier of a failable element, e.g. ``el.line.L3``."""
    return _KIND_PREFIX[kind] + str(element_id)


def component_kind(cid: str) -> str:
    for kind, prefix in _KIND_PREFIX.items():
        if cid.startswith(prefix):
            return kind
    raise KeyError(cid)


def component_group(cid: str) -> str:
    """Carrier group a failable component belongs to: el, gas, heat or cp."""
    return cid.split(".", 1)[0]


# --------------------------------------------------------------------------- MES


@dataclass(frozen=True)
class MultiEnergyNetwork:
    electricity: ElectricityNetwork
    gas: GasNetwork = field(default_factory=GasNetwork)
    heat: HeatNetwork = field(default_factory=HeatNetwork)
    coupling_points: tuple[CouplingPoint, ...] = ()
    name: str = "mes"
    unit_factor: float = DEFAULT_UNIT_FACTOR

    # ---- registry

    @property
    def component_ids(self) -> tuple[str, ...]:
        cached = self.__dict__.get("_component_ids")
        if cached is None:
            cached = tuple(cid for cid, _ in self.iter_components())
            object.__setattr__(self, "_component_ids", cached)
        return cached

    def iter_components(self) -> Iterable[tuple[str, object]]:
        el, gas, heat = self.electricity, self.gas, self.heat
        for x in el.lines:
            yield component_id("line", x.id), x
        for x in el.generators:
            yield component_id("generator", x.id), x
        for x in gas.pipes:
            yield component_id("gas_pipe", x.id), x
        for x in gas.sources:
            yield component_id("gas_source", x.id), x
        for x in heat.pipes:
            yield component_id("water_pipe", x.id), x
        for x in heat.producers:
            yield component_id("heat_producer", x.id), x
        for x in self.coupling_points:
            yield component_id("cp", x.id), x

    def component(self, cid: str):
        registry = self.__dict__.get("_registry")
        if registry is None:
            registry = dict(self.iter_components())
            object.__setattr__(self, "_registry", registry)
        return registry[cid]

    def demand_power_mw(self) -> dict[Carrier, dict[str, float]]:
        """Demand powers per carrier; gas demand converted via HHV."""
        hhv = self.gas.constants.hhv_kwh_per_kg
        return {
            Carrier.ELECTRICITY: {d.id: d.p_mw for d in self.electricity.demands},
            Carrier.GAS: {d.id: d.mass_flow_kg_s * self.unit_factor * hhv for d in self.gas.demands},
            Carrier.HEAT: {d.id: d.h_mw for d in self.heat.demands},
        }

    def position(self, unit_id: int) -> tuple[float, float]:
        for b in self.electricity.buses:
            if b.id == unit_id:
                return (b.x, b.y)
        return (0.0, 0.0)

    def replace(self, **changes) -> "MultiEnergyNetwork":
        return dataclasses.replace(self, **changes)

    # ---- validation

    def validate(self) -> "MultiEnergyNetwork":
        validate_network(self)
        return self

    # ---- interchange

    def to_dict(self) -> dict:
        return network_to_dict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MultiEnergyNetwork":
        return network_from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MultiEnergyNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _dupes(values) -> list:
    seen, out = set(), []
    for v in values:
        if v in seen:
            out.append(v)
        seen.add(v)
    return out


def validate_network(net: MultiEnergyNetwork) -> None:
    """Raise :class:`StructuralError` naming the first broken reference."""
    el = net.electricity
    bus_ids = {b.id for b in el.buses}
    if d := _dupes(b.id for b in el.buses):
        raise StructuralError(f"duplicate bus ids {d}")
    if el.slack_bus not in bus_ids:
        raise StructuralError(f"slack bus {el.slack_bus} is not a bus")
    for x in el.lines:
        for end in (x.from_bus, x.to_bus):
            if end not in bus_ids:
                raise StructuralError(f"line {x.id} references missing bus {end}")
        if x.r_ohm == 0 and x.x_ohm == 0:
            raise StructuralError(f"line {x.id} has zero impedance")
        if x.max_i_ka <= 0:
            raise StructuralError(f"line {x.id} has non-positive rating")
    for group, items in (("generator", el.generators), ("demand", el.demands), ("shunt", el.shunts)):
        for x in items:
            if x.bus not in bus_ids:
                raise StructuralError(f"{group} {x.id} references missing bus {x.bus}")

    for label, sub, units in (
        ("gas", net.gas, (("source", net.gas.sources), ("demand", net.gas.demands))),
        ("heat", net.heat, (("producer", net.heat.producers), ("demand", net.heat.demands))),
    ):
        if sub.empty:
            if sub.pipes or any(items for _, items in units):
                raise StructuralError(f"{label} network has elements but no junctions")
            continue
        js = set(sub.junctions)
        if d := _dupes(sub.junctions):
            raise StructuralError(f"duplicate {label} junctions {d}")
        if sub.slack_junction not in js:
            raise StructuralError(f"{label} slack junction {sub.slack_junction} is not a junction")
        for p in sub.pipes:
            for end in (p.from_junction, p.to_junction):
                if end not in js:
                    raise StructuralError(f"{label} pipe {p.id} references missing junction {end}")
            if p.diameter_m <= 0 or p.length_m <= 0 or p.roughness_m <= 0:
                raise StructuralError(f"{label} pipe {p.id} needs positive length, diameter, roughness")
        for group, items in units:
            for x in items:
                if x.junction not in js:
                    raise StructuralError(f"{label} {group} {x.id} references missing junction {x.junction}")

    if not net.heat.empty:
        _check_acyclic(net.heat)

    gas_js, heat_js = set(net.gas.junctions), set(net.heat.junctions)
    for cp in net.coupling_points:
        for eta in (cp.eta_el, cp.eta_heat, cp.eta_gas):
            if not 0 <= eta <= 1:
                raise StructuralError(f"coupling point {cp.id} efficiency {eta} outside [0, 1]")
        if cp.rating < 0:
            raise StructuralError(f"coupling point {cp.id} has negative rating")
        needed = {
            CPKind.CHP: ("eta_el", "eta_heat"),
            CPKind.P2H: ("eta_el",),
            CPKind.P2G: ("eta_gas",),
        }[cp.kind]
        for name in needed:
            if getattr(cp, name) <= 0:
                raise StructuralError(f"coupling point {cp.id} needs positive {name}")
        for carrier in cp.carriers():
            ref = cp.attachment(carrier)
            pool = {Carrier.ELECTRICITY: bus_ids, Carrier.GAS: gas_js, Carrier.HEAT: heat_js}[carrier]
            if ref is None or ref not in pool:
                raise StructuralError(
                    f"coupling point {cp.id} has dangling {carrier.short} attachment {ref}"
                )

    ids = [cid for cid, _ in net.iter_components()]
    if d := _dupes(ids):
        raise StructuralError(f"duplicate component ids {d}")


def _check_acyclic(heat: HeatNetwork) -> None:
    parent = {j: j for j in heat.junctions}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for p in heat.pipes:
        ra, rb = find(p.from_junction), find(p.to_junction)
        if ra == rb:
            raise StructuralError(f"heat pipe {p.id} closes a cycle; heat networks must be trees")
        parent[ra] = rb


# --------------------------------------------------------------------------- (de)serialisation


def _rows(items) -> list[dict]:
    out = []
    for x in items:
        d = dataclasses.asdict(x)
        if "kind" in d:
            d["kind"] = x.kind.value
        out.append(d)
    return out


def network_to_dict(net: MultiEnergyNetwork) -> dict:
    el, gas, heat = net.electricity, net.gas, net.heat
    return {
        "schema_version": SCHEMA_VERSION,
        "name": net.name,
        "unit_factor": net.unit_factor,
        "electricity": {
            "base_mva": el.base_mva,
            "slack": {"bus": el.slack_bus, "vm_pu": el.slack_vm_pu, "max_import_mw": el.slack_max_import_mw},
            "buses": _rows(el.buses),
            "lines": _rows(el.lines),
            "generators": _rows(el.generators),
            "demands": _rows(el.demands),
            "shunts": _rows(el.shunts),
        },
        "gas": {
            "constants": dataclasses.asdict(gas.constants),
            "slack": {
                "junction": gas.slack_junction,
                "pressure_pa": gas.slack_pressure_pa,
                "max_import_kg_s": gas.slack_max_import_kg_s,
            },
            "junctions": list(gas.junctions),
            "pipes": _rows(gas.pipes),
            "sources": _rows(gas.sources),
            "demands": _rows(gas.demands),
        },
        "heat": {
            "constants": dataclasses.asdict(heat.constants),
            "slack": {
                "junction": heat.slack_junction,
                "supply_temperature_k": heat.supply_temperature_k,
                "pressure_pa": heat.slack_pressure_pa,
                "max_supply_mw": heat.slack_max_supply_mw,
            },
            "junctions": list(heat.junctions),
            "pipes": _rows(heat.pipes),
            "producers": _rows(heat.producers),
            "demands": _rows(heat.demands),
        },
        "coupling_points": _rows(net.coupling_points),
    }


def _build(cls, rows):
    names = {f.name for f in dataclasses.fields(cls)}
    out = []
    for r in rows or ():
        unknown = set(r) - names
        if unknown:
            raise StructuralError(f"{cls.__name__} has unknown fields {sorted(unknown)}")
        out.append(cls(**r))
    return tuple(out)


def network_from_dict(doc: dict) -> MultiEnergyNetwork:
    version = doc.get("schema_version")
    if version is None:
        raise StructuralError("network document lacks schema_version")
    if version != SCHEMA_VERSION:
        raise StructuralError(f"unsupported schema_version {version}")
    e = doc["electricity"]
    el = ElectricityNetwork(
        buses=_build(Bus, e["buses"]),
        lines=_build(Line, e.get("lines")),
        generators=_build(Generator, e.get("generators")),
        demands=_build(ElectricDemand, e.get("demands")),
        shunts=_build(Shunt, e.get("shunts")),
        slack_bus=e["slack"]["bus"],
        slack_vm_pu=e["slack"].get("vm_pu", 1.0),
        slack_max_import_mw=e["slack"].get("max_import_mw"),
        base_mva=e.get("base_mva", 1.0),
    )
    g = doc.get("gas") or {}
    gs = g.get("slack") or {}
    gas = GasNetwork(
        junctions=tuple(g.get("junctions", ())),
        pipes=_build(GasPipe, g.get("pipes")),
        sources=_build(GasSource, g.get("sources")),
        demands=_build(GasDemand, g.get("demands")),
        slack_junction=gs.get("junction"),
        slack_pressure_pa=gs.get("pressure_pa", 4.0e5),
        slack_max_import_kg_s=gs.get("max_import_kg_s"),
        constants=GasConstants(**g.get("constants", {})),
    )
    h = doc.get("heat") or {}
    hs = h.get("slack") or {}
    heat = HeatNetwork(
        junctions=tuple(h.get("junctions", ())),
        pipes=_build(WaterPipe, h.get("pipes")),
        producers=_build(HeatProducer, h.get("producers")),
        demands=_build(HeatDemand, h.get("demands")),
        slack_junction=hs.get("junction"),
        supply_temperature_k=hs.get("supply_temperature_k", 343.15),
        slack_pressure_pa=hs.get("pressure_pa", 6.0e5),
        slack_max_supply_mw=hs.get("max_supply_mw"),
        constants=WaterConstants(**h.get("constants", {})),
    )
    cps = []
    for r in doc.get("coupling_points", ()):
        r = dict(r)
        r["kind"] = CPKind(r["kind"])
        cps.append(CouplingPoint(**r))
    net = MultiEnergyNetwork(
        electricity=el,
        gas=gas,
        heat=heat,
        coupling_points=tuple(cps),
        name=doc.get("name", "mes"),
        unit_factor=doc.get("unit_factor", DEFAULT_UNIT_FACTOR),
    )
    return net.validate()
