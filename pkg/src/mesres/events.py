"""High-impact event sampling.

An event is a sequence of vitality vectors, one per time step, holding the
state of every failable component: 1 functional, 0 broken, 2 repaired.  The
failure probability of a component is a product of a type coefficient, the
component's own fragility, a spatial factor, the grid's event bias and a
baseline probability.

Each component draws its uniform numbers from its own stream keyed by its id,
so two events with the same seed on networks that share a component see the
same numbers for it.  This keeps comparisons across coupling densities paired.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from mesres.errors import ConfigError, ContractViolation
from mesres.model.degrade import BROKEN, FUNCTIONAL, REPAIRED
from mesres.model.network import MultiEnergyNetwork, component_group, component_kind

#: event bias (p_el, p_heat, p_gas, p_cp) of the scenario presets
PRESETS = {
    "high-electricity": (3.0, 0.0, 0.0, 0.0),
    "high-heating": (0.0, 3.0, 0.0, 0.0),
    "high-gas": (0.0, 0.0, 3.0, 0.0),
    "high-cp": (0.0, 0.0, 0.0, 3.0),
    "low-overall": (1.0, 1.0, 1.0, 1.0),
    "medium-overall": (2.0, 2.0, 2.0, 2.0),
}
GRIDS = ("el", "heat", "gas", "cp")
KINDS = ("line", "generator", "gas_pipe", "gas_source", "water_pipe", "heat_producer", "cp")

DEFAULT_P_BASE = 4.0e-4
DEFAULT_P_REPAIR = 0.25
DEFAULT_STEPS = 24


@dataclass(frozen=True)
class StormModel:
    """Disc of elevated spatial coefficient moving in a straight line.

    Components within ``radius`` of the centre at step ``i`` get ``peak``,
    all others ``background``.  Coordinates are those of the base grid.
    """

    start: tuple = (0.0, 0.0)
    velocity: tuple = (1.0, 0.0)
    radius: float = 2.0
    peak: float = 3.0
    background: float = 1.0

    def centre(self, step: int) -> np.ndarray:
        return np.asarray(self.start, dtype=float) + step * np.asarray(self.velocity, dtype=float)

    def beta(self, positions: np.ndarray, step: int) -> np.ndarray:
        d = np.linalg.norm(positions - self.centre(step)[None, :], axis=1)
        return np.where(d <= self.radius, self.peak, self.background)


@dataclass(frozen=True)
class EventParams:
    """Knobs of the event model."""

    p_grid: dict = field(default_factory=lambda: dict(zip(GRIDS, PRESETS["medium-overall"])))
    p_base: float = DEFAULT_P_BASE
    p_repair: float = DEFAULT_P_REPAIR
    n_steps: int = DEFAULT_STEPS
    #: per component kind; missing kinds use 1
    rho: dict = field(default_factory=dict)
    storm: StormModel | None = None

    def __post_init__(self):
        problems = []
        for g in GRIDS:
            if g not in self.p_grid:
                problems.append(f"p_grid.{g}: missing")
            elif not self.p_grid[g] >= 0:
                problems.append(f"p_grid.{g}: must be nonnegative")
        for g in self.p_grid:
            if g not in GRIDS:
                problems.append(f"p_grid.{g}: unknown grid")
        for k, v in self.rho.items():
            if k not in KINDS:
                problems.append(f"rho.{k}: unknown component kind")
            elif not v >= 0:
                problems.append(f"rho.{k}: must be nonnegative")
        if not self.p_base >= 0:
            problems.append("p_base: must be nonnegative")
        if not 0 <= self.p_repair <= 1:
            problems.append("p_repair: must lie in [0, 1]")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            problems.append("n_steps: must be a positive integer")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def preset(cls, name: str, **kwargs) -> "EventParams":
        if name not in PRESETS:
            raise ConfigError([f"preset: unknown preset {name!r}, expected one of {sorted(PRESETS)}"])
        return cls(p_grid=dict(zip(GRIDS, PRESETS[name])), **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["storm"] = None if self.storm is None else asdict(self.storm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EventParams":
        d = dict(d)
        storm = d.pop("storm", None)
        if storm is not None:
            storm = StormModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in storm.items()})
        return cls(storm=storm, **d)


# --------------------------------------------------------------------------- probabilities


def _component_positions(net: MultiEnergyNetwork) -> np.ndarray:
    pos = []
    for cid, comp in net.iter_components():
        kind = component_kind(cid)
        if kind == "line":
            a, b = net.position(comp.from_bus), net.position(comp.to_bus)
        elif kind in ("gas_pipe", "water_pipe"):
            a, b = net.position(comp.from_junction), net.position(comp.to_junction)
        elif kind == "generator":
            a = b = net.position(comp.bus)
        elif kind in ("gas_source", "heat_producer"):
            a = b = net.position(comp.junction)
        else:
            a = b = net.position(comp.el_bus if comp.el_bus is not None else comp.attachment(comp.carriers()[0]))
        pos.append(((a[0] + b[0]) / 2, (a[1] + b[1]) / 2))
    return np.asarray(pos, dtype=float).reshape(-1, 2)


class _Static:
    """Step-independent factors of the failure probability, per component."""

    def __init__(self, net: MultiEnergyNetwork, params: EventParams):
        ids = net.component_ids
        self.ids = ids
        comps = dict(net.iter_components())
        rho = np.array([params.rho.get(component_kind(c), 1.0) for c in ids], dtype=float)
        gamma = np.array([comps[c].fragility for c in ids], dtype=float)
        grid = np.array([params.p_grid[component_group(c)] for c in ids], dtype=float)
        self.static = rho * gamma * grid * params.p_base
        self.positions = _component_positions(net) if params.storm is not None else None
        self.storm = params.storm

    def at(self, step: int) -> np.ndarray:
        p = self.static
        if self.storm is not None:
            p = p * self.storm.beta(self.positions, step)
        return np.clip(p, 0.0, 1.0)


def failure_probabilities(net: MultiEnergyNetwork, step: int, params: EventParams) -> np.ndarray:
    """Failure probability of every component at ``step``, aligned with ``net.component_ids``."""
    return _Static(net, params).at(step)


def component_failure_probability(net: MultiEnergyNetwork, cid: str, step: int, params: EventParams) -> float:
    """Failure probability of one component, clamped to [0, 1]."""
    i = net.component_ids.index(cid)
    return float(failure_probabilities(net, step, params)[i])


def step_vitality(theta_prev, p_fail, p_repair, r) -> np.ndarray:
    """Next vitality vector from the previous one and one uniform draw per component.

    The cases are checked in order: a fresh failure, then the repair of a
    broken component, then a component staying broken; everything else is
    functional.  A repaired component is functional from then on and may fail
    again.
    """
    theta_prev = np.asarray(theta_prev)
    p_fail = np.clip(np.asarray(p_fail, dtype=float), 0.0, 1.0)
    p_repair = np.clip(np.broadcast_to(np.asarray(p_repair, dtype=float), theta_prev.shape), 0.0, 1.0)
    r = np.asarray(r, dtype=float)
    if not (theta_prev.shape == p_fail.shape == r.shape):
        raise ContractViolation("state, probability and random vectors must have the same length")
    out = np.full(theta_prev.shape, FUNCTIONAL, dtype=np.int8)
    broken_before = theta_prev == BROKEN
    out[broken_before] = BROKEN
    out[broken_before & (p_repair >= r)] = REPAIRED
    out[r < p_fail] = BROKEN
    return out


# --------------------------------------------------------------------------- events


def _seed_tuple(seed) -> tuple:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def component_stream_seed(seed, cid: str) -> list:
    return [*_seed_tuple(seed), zlib.crc32(cid.encode())]


def event_uniforms(component_ids, n_steps: int, seed) -> np.ndarray:
    """``(n_steps, m)`` uniforms; column ``j`` comes from the stream of component ``j``."""
    cols = [np.random.default_rng(component_stream_seed(seed, cid)).random(n_steps) for cid in component_ids]
    return np.column_stack(cols) if cols else np.zeros((n_steps, 0))


@dataclass
class Event:
    """Vitality vectors of one event, ``states[i, j]`` for step ``i`` and component ``j``."""

    component_ids: tuple
    states: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    def failed_sets(self) -> list[frozenset]:
        ids = self.component_ids
        return [frozenset(ids[j] for j in np.flatnonzero(row == BROKEN)) for row in self.states]

    def broken_steps(self) -> dict:
        """Component id -> steps at which it is broken (only components that break)."""
        out = {}
        for j in np.flatnonzero((self.states == BROKEN).any(axis=0)):
            out[self.component_ids[j]] = np.flatnonzero(self.states[:, j] == BROKEN)
        return out

    def to_record(self) -> dict:
        """Compact record: the state changes only."""
        changes = []
        prev = np.full(len(self.component_ids), FUNCTIONAL)
        for i, row in enumerate(self.states):
            for j in np.flatnonzero(row != prev):
                changes.append([i, self.component_ids[j], int(row[j])])
            prev = row
        return {"n_steps": self.n_steps, "changes": changes}

    @classmethod
    def from_record(cls, record: dict, component_ids) -> "Event":
        ids = tuple(component_ids)
        col = {c: j for j, c in enumerate(ids)}
        n = int(record["n_steps"])
        states = np.full((n, len(ids)), FUNCTIONAL, dtype=np.int8)
        by_step: dict = {}
        for i, cid, s in record["changes"]:
            by_step.setdefault(int(i), []).append((col[cid], int(s)))
        cur = np.full(len(ids), FUNCTIONAL, dtype=np.int8)
        for i in range(n):
            for j, s in by_step.get(i, ()):
                cur[j] = s
            states[i] = cur
        return cls(ids, states)

    def dumps(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


def generate_event(net: MultiEnergyNetwork, params: EventParams, seed) -> Event:
    """Sample one event starting from the all-functional state."""
    static = _Static(net, params)
    ids = static.ids
    n = int(params.n_steps)
    r = event_uniforms(ids, n, seed)
    states = np.empty((n, len(ids)), dtype=np.int8)
    theta = np.full(len(ids), FUNCTIONAL, dtype=np.int8)
    for i in range(n):
        theta = step_vitality(theta, static.at(i), params.p_repair, r[i])
        states[i] = theta
    return Event(ids, states)
