"""Command line entry point: ``mesres <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import traceback
from importlib import metadata

import numpy as np
import pandas as pd
import scipy

from mesres.config import ScenarioConfig, cell_name, load_config, parse_config, validate_config
from mesres.errors import ConfigError, MesError
from mesres.montecarlo import FLOAT_FORMAT, json_default, run_monte_carlo, write_report

log = logging.getLogger("mesres")


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"mesres": pkg, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__, "python": sys.version.split()[0]}


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=json_default)
        fh.write("\n")


def _csv(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def build_mes(cfg: ScenarioConfig, density: float):
    from mesres.synth import generate_mes

    return generate_mes(cfg.load_base_grid(), cfg.synth_config(density))


def write_metrics(net, cfg: ScenarioConfig, out_dir: str):
    """Topology metrics of ``net``; returns the MetricTable."""
    from mesres.metrics import compute_metrics
    from mesres.model.graph import build_topology_graph

    graph = build_topology_graph(net)
    table = compute_metrics(graph, **cfg.katz)
    _csv(table.nodes, os.path.join(out_dir, "metrics_nodes.csv"))
    _csv(table.edges, os.path.join(out_dir, "metrics_edges.csv"))
    _csv(table.components, os.path.join(out_dir, "metrics.csv"))
    _dump_json(graph.to_dict(), os.path.join(out_dir, "graph.json"))
    return table


def run_cell(cfg: ScenarioConfig, density: float, preset: str, out_dir: str, workers: int = 1) -> None:
    """One (density, preset) cell of the scenario matrix."""
    from mesres.metrics import export_correlation_data
    from mesres.model.network import network_to_dict

    net = build_mes(cfg, density)
    params = cfg.event_params(preset)
    os.makedirs(out_dir, exist_ok=True)
    _dump_json(network_to_dict(net), os.path.join(out_dir, "network.json"))
    table = write_metrics(net, cfg, out_dir)
    report = run_monte_carlo(net, params, seed=cfg.seed, stopping=cfg.stopping, workers=workers, bounds=cfg.bounds)
    config = cfg.to_dict()
    config.pop("out")  # the location does not affect the results
    manifest = {
        "config": config,
        "cell": {"density": density, "preset": preset},
        "seeds": {"master": cfg.seed, "events": "(master, event index)", "synth": cfg.synth_config(density).seed},
        "event_params": params.to_dict(),
        "versions": versions(),
    }
    write_report(report, out_dir, manifest)
    _csv(export_correlation_data(table, report), os.path.join(out_dir, "correlation.csv"))


def run_scenario(cfg: ScenarioConfig, out: str | None = None, workers: int | None = None, dry_run: bool = False) -> int:
    """Run every (density, preset) cell; returns the exit status.

    Each cell is written to a temporary directory first and moved into place
    when complete, so a failed cell never leaves partial tables behind and
    never touches the other cells.  Failures are recorded in ``error.json``.
    """
    out = out or cfg.out
    workers = workers or cfg.workers
    os.makedirs(out, exist_ok=True)
    status = 0
    for density, preset in cfg.cells():
        name = cell_name(density, preset)
        final = os.path.join(out, name)
        if dry_run:
            try:
                net = build_mes(cfg, density)
                cfg.event_params(preset)
                print(f"{name}: ok ({len(net.component_ids)} components)")
            except MesError as exc:
                print(f"{name}: {exc}", file=sys.stderr)
                status = 1
            continue
        tmp = final + ".partial"
        shutil.rmtree(tmp, ignore_errors=True)
        try:
            run_cell(cfg, density, preset, tmp, workers)
        except Exception as exc:  # keep going with the other cells
            status = 1
            log.error("cell %s failed: %s", name, exc)
            os.makedirs(tmp, exist_ok=True)
            _dump_json({"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}, os.path.join(tmp, "error.json"))
            shutil.rmtree(final + ".failed", ignore_errors=True)
            os.replace(tmp, final + ".failed")
            continue
        shutil.rmtree(final, ignore_errors=True)
        os.replace(tmp, final)
        print(f"{name}: done")
    return status


# --------------------------------------------------------------------------- subcommands


def _scenario(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "density", None) is not None:
        overrides["densities"] = [args.density]
    if getattr(args, "preset", None) is not None:
        overrides["presets"] = [args.preset]
    if overrides:
        doc = cfg.to_dict()
        doc.update(overrides)
        cfg = parse_config(doc, root=cfg.root)
    return cfg


def _density(args, cfg) -> float:
    return float(args.density if args.density is not None else cfg.densities[0])


def cmd_generate(args) -> int:
    from mesres.model.network import network_to_dict

    cfg = _scenario(args)
    os.makedirs(args.out, exist_ok=True)
    for d in cfg.densities:
        net = build_mes(cfg, d)
        path = os.path.join(args.out, f"mes_d{d:g}.json")
        _dump_json(network_to_dict(net), path)
        counts = {k: len(v) for k, v in (("buses", net.electricity.buses), ("gas_junctions", net.gas.junctions), ("heat_junctions", net.heat.junctions), ("coupling_points", net.coupling_points))}
        print(f"{path}: {counts}")
    return 0


def cmd_solve(args) -> int:
    from mesres.flow.solver import solve_multi_energy_flow

    cfg = _scenario(args)
    net = build_mes(cfg, _density(args, cfg))
    state = solve_multi_energy_flow(net)
    os.makedirs(args.out, exist_ok=True)
    _dump_json(state.summary(), os.path.join(args.out, "state.json"))
    _csv(state.bus_frame(), os.path.join(args.out, "buses.csv"))
    _csv(state.line_frame(), os.path.join(args.out, "lines.csv"))
    _csv(state.gas_frame(), os.path.join(args.out, "gas.csv"))
    _csv(state.heat_frame(), os.path.join(args.out, "heat.csv"))
    print(json.dumps(state.summary(), default=json_default))
    return 0


def cmd_shed(args) -> int:
    from mesres.model.degrade import degrade
    from mesres.shedding import LoadShedder

    cfg = _scenario(args)
    net = build_mes(cfg, _density(args, cfg))
    failed = frozenset(args.fail or ())
    unknown = sorted(failed - set(net.component_ids))
    if unknown:
        raise ConfigError([f"--fail: unknown component {c!r}" for c in unknown])
    sol = LoadShedder(net, cfg.bounds).solve(degrade(net, failed))
    os.makedirs(args.out, exist_ok=True)
    _dump_json({"failed": sorted(failed), **sol.to_dict()}, os.path.join(args.out, "shedding.json"))
    print(json.dumps({"failed": sorted(failed), "ls_mw": sol.ls, "method": sol.method, "feasible": sol.feasible}))
    return 0


def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    return run_scenario(cfg, out=args.out, workers=args.workers, dry_run=args.dry_run)


def cmd_metrics(args) -> int:
    cfg = _scenario(args)
    net = build_mes(cfg, _density(args, cfg))
    os.makedirs(args.out, exist_ok=True)
    table = write_metrics(net, cfg, args.out)
    print(f"{len(table.nodes)} nodes, {len(table.edges)} edges, {len(table.components)} components -> {args.out}")
    return 0


def cmd_validate(args) -> int:
    if args.config is None:
        print("validate needs --config", file=sys.stderr)
        return 2
    problems = validate_config(args.config, dry_run=args.dry_run)
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    if not problems:
        print(f"{args.config}: ok")
    return 1 if problems else 0


COMMANDS = {
    "generate": (cmd_generate, "build the multi-energy networks"),
    "solve": (cmd_solve, "solve the healthy coupled steady state"),
    "shed": (cmd_shed, "optimise load shedding for a failed set"),
    "simulate": (cmd_simulate, "run the Monte Carlo scenario matrix"),
    "metrics": (cmd_metrics, "compute topology metrics"),
    "validate": (cmd_validate, "check a scenario config"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mesres", description="Resilience assessment of coupled multi-energy networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="scenario YAML file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="worker processes for the Monte Carlo")
        p.add_argument("--density", type=float, default=None, help="coupling point density (restricts the sweep)")
        p.add_argument("--preset", default=None, help="event preset (restricts the matrix)")
        p.add_argument("--dry-run", action="store_true", help="build networks only, do not simulate")
        if name == "shed":
            p.add_argument("--fail", action="append", metavar="COMPONENT", help="failed component id (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command != "simulate":
        args.out = "."
    if args.workers is not None and args.workers < 1:
        print("error: --workers: must be a positive integer", file=sys.stderr)
        return 2
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return 2
    except MesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
