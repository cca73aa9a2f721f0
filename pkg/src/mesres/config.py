"""Scenario configuration: YAML file -> validated ScenarioConfig."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import yaml

from mesres.bounds import OperationalBounds
from mesres.errors import ConfigError, MesError
from mesres.events import PRESETS, EventParams, StormModel
from mesres.montecarlo import StoppingConfig
from mesres.synth import SynthConfig, SynthParameters, rural_mv_grid

BUILTIN_GRIDS = {"rural-mv": rural_mv_grid}
DEFAULT_DENSITIES = (0.0, 0.5, 1.0, 1.5, 2.0)
DEFAULT_PRESETS = tuple(PRESETS)
CUSTOM = "custom"

_TOP_KEYS = {"seed", "out", "workers", "base_grid", "densities", "presets", "synth", "events", "stopping", "bounds", "katz"}
_EVENT_KEYS = {"p_base", "p_repair", "n_steps", "rho", "storm", "p_grid"}


@dataclass
class ScenarioConfig:
    seed: int = 0
    out: str = "results"
    workers: int = 1
    base_grid: str = "rural-mv"
    densities: tuple = DEFAULT_DENSITIES
    #: preset names; "custom" uses ``events.p_grid``
    presets: tuple = DEFAULT_PRESETS
    synth: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)
    stopping: StoppingConfig = field(default_factory=StoppingConfig)
    bounds: OperationalBounds = field(default_factory=OperationalBounds)
    katz: dict = field(default_factory=lambda: {"alpha": 0.1, "beta": 1.0})
    #: directory of the config file, for resolving relative paths
    root: str = "."

    def synth_config(self, density: float) -> SynthConfig:
        s = dict(self.synth)
        params = SynthParameters(**s.pop("params", {}))
        seed = s.pop("seed", self.seed)
        return SynthConfig.with_density(density, seed=seed, params=params, **s)

    def event_params(self, preset: str) -> EventParams:
        ev = dict(self.events)
        p_grid = ev.pop("p_grid", None)
        storm = ev.pop("storm", None)
        if storm is not None:
            storm = StormModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in storm.items()})
        if preset == CUSTOM:
            return EventParams(p_grid=dict(p_grid), storm=storm, **ev)
        return EventParams.preset(preset, storm=storm, **ev)

    def cells(self) -> list[tuple[float, str]]:
        return [(float(d), p) for d in self.densities for p in self.presets]

    def load_base_grid(self):
        return load_base_grid(self.base_grid, self.root)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "workers": self.workers,
            "base_grid": self.base_grid,
            "densities": [float(d) for d in self.densities],
            "presets": list(self.presets),
            "synth": self.synth,
            "events": self.events,
            "stopping": dataclasses.asdict(self.stopping),
            "bounds": self.bounds.to_dict(),
            "katz": dict(self.katz),
        }


def cell_name(density: float, preset: str) -> str:
    return f"d{density:g}_{preset}"


def load_base_grid(spec: str, root: str = "."):
    """Built-in grid name or path to a network document (JSON/YAML) whose electricity part is used."""
    if spec in BUILTIN_GRIDS:
        return BUILTIN_GRIDS[spec]()
    from mesres.model.network import network_from_dict

    path = spec if os.path.isabs(spec) else os.path.join(root, spec)
    if not os.path.exists(path):
        raise ConfigError([f"base_grid: no built-in grid or file named {spec!r}"])
    with open(path) as fh:
        doc = json.load(fh) if path.endswith(".json") else yaml.safe_load(fh)
    try:
        return network_from_dict(doc).electricity
    except (MesError, KeyError, TypeError) as exc:
        raise ConfigError([f"base_grid: cannot load {path}: {exc}"]) from exc


def _check_fields(problems, value, cls, path):
    if not isinstance(value, dict):
        problems.append(f"{path}: must be a mapping")
        return False
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - names)
    for k in unknown:
        problems.append(f"{path}.{k}: unknown field")
    return not unknown


def parse_config(doc: dict, root: str = ".") -> ScenarioConfig:
    """Validate a config mapping; every problem is reported with its field path."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    problems = [f"{k}: unknown field" for k in sorted(set(doc) - _TOP_KEYS)]
    cfg = ScenarioConfig(root=root)

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("seed: must be a nonnegative integer")
    else:
        cfg.seed = seed
    workers = doc.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        problems.append("workers: must be a positive integer")
    else:
        cfg.workers = workers
    cfg.out = str(doc.get("out", cfg.out))
    cfg.base_grid = str(doc.get("base_grid", cfg.base_grid))

    dens = doc.get("densities", list(DEFAULT_DENSITIES))
    if not isinstance(dens, list) or not dens:
        problems.append("densities: must be a nonempty list")
    else:
        for i, d in enumerate(dens):
            if isinstance(d, bool) or not isinstance(d, (int, float)) or not d >= 0:
                problems.append(f"densities[{i}]: must be a nonnegative number, got {d!r}")
        cfg.densities = tuple(float(d) for d in dens if isinstance(d, (int, float)) and not isinstance(d, bool))

    presets = doc.get("presets", list(DEFAULT_PRESETS))
    if isinstance(presets, str):
        presets = [presets]
    if not isinstance(presets, list) or not presets:
        problems.append("presets: must be a nonempty list")
    else:
        for i, p in enumerate(presets):
            if p != CUSTOM and p not in PRESETS:
                problems.append(f"presets[{i}]: unknown preset {p!r}, expected one of {sorted(PRESETS)} or {CUSTOM!r}")
        cfg.presets = tuple(str(p) for p in presets)

    synth = doc.get("synth", {}) or {}
    if isinstance(synth, dict):
        allowed = {"seed", "gas_density", "heat_density", "params"}
        for k in sorted(set(synth) - allowed):
            problems.append(f"synth.{k}: unknown field")
        if "params" in synth:
            _check_fields(problems, synth["params"], SynthParameters, "synth.params")
        cfg.synth = synth
    else:
        problems.append("synth: must be a mapping")

    events = doc.get("events", {}) or {}
    if isinstance(events, dict):
        for k in sorted(set(events) - _EVENT_KEYS):
            problems.append(f"events.{k}: unknown field")
        if CUSTOM in cfg.presets and "p_grid" not in events:
            problems.append("events.p_grid: required by the custom preset")
        if "storm" in events and events["storm"] is not None:
            _check_fields(problems, events["storm"], StormModel, "events.storm")
        cfg.events = events
    else:
        problems.append("events: must be a mapping")

    for key, cls in (("stopping", StoppingConfig), ("bounds", OperationalBounds)):
        sec = doc.get(key, {}) or {}
        if _check_fields(problems, sec, cls, key):
            try:
                setattr(cfg, key, cls(**sec))
            except ConfigError as exc:
                problems.extend(p if p.startswith(f"{key}.") else f"{key}: {p}" for p in exc.problems)
            except TypeError as exc:
                problems.append(f"{key}: {exc}")

    katz = doc.get("katz", {}) or {}
    if isinstance(katz, dict):
        for k in sorted(set(katz) - {"alpha", "beta"}):
            problems.append(f"katz.{k}: unknown field")
        cfg.katz = {"alpha": float(katz.get("alpha", 0.1)), "beta": float(katz.get("beta", 1.0))}
        if cfg.katz["alpha"] < 0:
            problems.append("katz.alpha: must be nonnegative")
    else:
        problems.append("katz: must be a mapping")

    if problems:
        raise ConfigError(problems)

    # semantic checks that need constructed objects
    for p in cfg.presets:
        try:
            cfg.event_params(p)
        except ConfigError as exc:
            problems.extend(f"events.{q}" for q in exc.problems)
        except TypeError as exc:
            problems.append(f"events: {exc}")
    try:
        cfg.synth_config(cfg.densities[0])
    except (MesError, TypeError) as exc:
        problems.append(f"synth: {exc}")
    if problems:
        raise ConfigError(sorted(set(problems), key=problems.index))
    return cfg


def load_config(path: str | None) -> ScenarioConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: invalid YAML: {exc}"]) from exc
    return parse_config(doc, root=os.path.dirname(os.path.abspath(path)))


def validate_config(path: str, dry_run: bool = False) -> list[str]:
    """List of problems (empty when valid).  ``dry_run`` also builds every MES."""
    try:
        cfg = load_config(path)
        base = cfg.load_base_grid()
    except ConfigError as exc:
        return exc.problems
    if dry_run:
        from mesres.synth import generate_mes

        out = []
        for d in cfg.densities:
            try:
                generate_mes(base, cfg.synth_config(d))
            except MesError as exc:
                out.append(f"densities: density {d:g} does not give a feasible network: {exc}")
        return out
    return []
