"""Acceptance suite: one PASS/FAIL line per criterion.

The Monte Carlo runs use the default stopping rule and take several minutes
in total; each (density, preset) run is done once per session and shared.
"""

import itertools
import math
import os
from functools import lru_cache

import numpy as np
import yaml

from conftest import case_mes, toy_mes
from oracles import GridSearchShedding, brute_force_metrics, make_graph, random_graph, wiener
from mesres import cli
from mesres.bounds import OperationalBounds
from mesres.events import EventParams
from mesres.flow import physics as ph
from mesres.flow.solver import solve_multi_energy_flow
from mesres.flow.system import FlowSystem
from mesres.metrics import betweenness, closeness_vitality, katz_centrality, shortest_paths
from mesres.model.degrade import degrade, healthy
from mesres.model.network import Carrier
from mesres.montecarlo import StoppingConfig, bootstrap_ci, carrier_grid_impact, kalman_stopping, run_monte_carlo
from mesres.shedding import LoadShedder

DENSITIES = (0.0, 0.5, 1.0, 1.5, 2.0)
GRID_STEP = 0.01


def verdict(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@lru_cache(maxsize=None)
def mc(density, preset):
    return run_monte_carlo(case_mes(density), EventParams.preset(preset), seed=0)


def ci(report, carrier=None):
    return bootstrap_ci(report.per_event_totals(carrier))


# --------------------------------------------------------------------------- 1


def fd_error(fs, x, u):
    jac = fs.jacobian(x, u)[0].toarray()
    fd = np.zeros_like(jac)
    for j in range(x.size):
        h = 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        # five-point stencil: O(h^4) truncation, needed where the heat demand model is strongly curved
        fd[:, j] = (8 * (fs.residual(x + e, u) - fs.residual(x - e, u)) - fs.residual(x + 2 * e, u) + fs.residual(x - 2 * e, u)) / (12 * h)
    return np.abs(jac - fd).max() / np.abs(jac).max()


def test_c1_solver_correctness(capsys):
    residuals, errors = [], []
    rng = np.random.default_rng(0)
    for d in DENSITIES:
        net = case_mes(d)
        fs = FlowSystem(healthy(net))
        u = fs.u_nominal()
        st = solve_multi_energy_flow(net)
        residuals.append(float(np.abs(fs.residual(st.x, u)).max()))
        for _ in range(10):
            x = st.x * (1 + 0.05 * rng.standard_normal(st.x.size)) + 0.01 * rng.standard_normal(st.x.size)
            errors.append(fd_error(fs, x, u))
    ok = max(residuals) < 1e-6 and len(errors) == 50 and max(errors) < 1e-6
    verdict(capsys, "C1", ok, f"max residual {max(residuals):.2e} over 5 densities; max Jacobian FD error {max(errors):.2e} at {len(errors)} states")


# --------------------------------------------------------------------------- 2


def test_c2_oracle_equivalence(capsys):
    variants = [
        ("A", toy_mes(line_rating_ka=0.02, gas_d=0.05), OperationalBounds()),
        ("B", toy_mes(line_rating_ka=0.03, gas_d=0.06), OperationalBounds(v_min=0.985, p_rel_min=0.9)),
    ]
    prefix = {Carrier.ELECTRICITY: "el.", Carrier.GAS: "gas.", Carrier.HEAT: "heat."}
    memo = {}
    n_combos, n_cmp, nontrivial, worst, bad = 0, 0, 0, 0.0, []
    for name, net, bounds in variants:
        oracle = GridSearchShedding(net, bounds, GRID_STEP)
        shedder = LoadShedder(net, bounds)
        for k in (1, 2):
            for failed in itertools.combinations(net.component_ids, k):
                n_combos += 1
                dnet = degrade(net, failed)
                sol = shedder.solve(dnet)
                for c in Carrier:
                    # without coupling points a carrier only sees its own failures
                    key = (name, c, frozenset(f for f in failed if f.startswith(prefix[c])))
                    if key not in memo:
                        memo[key] = oracle.carrier_optimum(dnet, c)
                    bf, evaluated = memo[key]
                    n_cmp += 1
                    nontrivial += evaluated > 1
                    nlp = sol.ls_by_carrier[c]
                    if bf is None:
                        if sol.feasible:
                            bad.append((name, failed, c.short, "oracle infeasible"))
                        continue
                    gap = bf - nlp
                    worst = max(worst, abs(gap))
                    if not -1e-9 <= gap <= oracle.grid_step_objective(c):
                        bad.append((name, failed, c.short, nlp, bf))
    ok = n_combos >= 20 and not bad
    verdict(capsys, "C2", ok, f"{n_combos} failure combinations, {n_cmp} carrier comparisons ({nontrivial} needing search); largest |grid - optimiser| {worst:.4f} MW; mismatches {bad[:3]}")


# --------------------------------------------------------------------------- 3


def test_c3_metric_oracles(capsys):
    counts_exact, bc_err, vit_err, katz_err = True, 0.0, 0.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n, edges = random_graph(rng)
        g = make_graph(n, edges)
        dist, count, node_bc, edge_bc = brute_force_metrics(n, edges)
        sp = shortest_paths(g)
        counts_exact &= bool(np.array_equal(sp.count.astype(int), count) and np.array_equal(sp.dist, dist))
        cb, ce = betweenness(g)
        bc_err = max(bc_err, np.abs(cb - node_bc).max(), max(abs(ce[k] - edge_bc[k]) for k in range(len(edges))))
        vit, flag = closeness_vitality(g)
        base, reach = wiener(n, edges)
        for v in range(n):
            w, r = wiener(n, edges, removed=v)
            keep = np.arange(n) != v
            lost = bool(np.any(reach[np.ix_(keep, keep)] & ~r[np.ix_(keep, keep)]))
            if lost != bool(flag[v]) or (lost and vit[v] != math.inf):
                vit_err = math.inf
            elif not lost:
                vit_err = max(vit_err, abs(vit[v] - (base - w)))
        a = np.zeros((n, n))
        for u, v, _ in edges:
            a[v, u] += 1
        rho = max(abs(np.linalg.eigvals(a)))
        alpha = 0.1 if 0.1 * rho < 0.9 else 0.5 / rho
        want = np.linalg.solve(np.eye(n) - alpha * a, np.ones(n))
        katz_err = max(katz_err, np.abs(katz_centrality(g, alpha=alpha) - want).max())
    ok = counts_exact and bc_err < 1e-9 and vit_err < 1e-9 and katz_err < 1e-8
    verdict(capsys, "C3", ok, f"100 graphs: path counts exact={counts_exact}, betweenness err {bc_err:.1e}, vitality err {vit_err:.1e}, Katz err {katz_err:.1e}")


# --------------------------------------------------------------------------- 4


def test_c4_trivial_zeros(capsys):
    zero = EventParams(p_grid={"el": 0.0, "heat": 0.0, "gas": 0.0, "cp": 0.0})
    rep = run_monte_carlo(case_mes(1.0), zero, seed=0)
    r_zero = all(v == 0.0 for v in rep.resilience.values())
    healthy_ls = max(LoadShedder(case_mes(d)).solve(healthy(case_mes(d))).ls for d in DENSITIES)
    pipe = dict(diameter=0.1, d_in=0.1, roughness=1e-4, viscosity=1.1e-5)
    friction = ph.friction_flow_term(0.0, **pipe)[0]
    gas = ph.weymouth_residual(5e5, 5e5, 0.0, length=1000.0, gamma_sq=1.0, **pipe)
    water = ph.darcy_weisbach_residual(2e5, 2e5, 0.0, length=1000.0, density=983.0, **pipe)
    loss = ph.heat_loss(360.0, 340.0, 0.0, insulation_k=0.5, length=1000.0, t_ext=283.15)
    ok = r_zero and healthy_ls == 0.0 and friction == 0.0 and gas == 0.0 and water == 0.0 and loss == 0.0
    verdict(capsys, "C4", ok, f"R with zero probabilities {rep.resilience} over {rep.n_events} events; healthy LS {healthy_ls}; f=0 terms {friction}, {gas}, {water}, {loss}")


# --------------------------------------------------------------------------- 5


def test_c5_high_electricity_trend(capsys):
    reps = {p: mc(1.0, p) for p in ("high-electricity", "high-gas", "high-heating")}
    r = {p: rep.resilience["el"] for p, rep in reps.items()}
    cis = {p: ci(rep, "el") for p, rep in reps.items()}
    n = {p: rep.n_events for p, rep in reps.items()}
    hi = "high-electricity"
    ok = all(n[p] >= 1000 for p in n) and all(r[hi] > r[p] and cis[hi][0] > cis[p][1] for p in ("high-gas", "high-heating"))
    detail = ", ".join(f"{p} R^el {r[p]:.4f} CI [{cis[p][0]:.4f}, {cis[p][1]:.4f}] n={n[p]}" for p in reps)
    verdict(capsys, "C5", ok, detail)


# --------------------------------------------------------------------------- 6


def test_c6_density_trend(capsys):
    reps = [mc(d, "medium-overall") for d in DENSITIES]
    means = [float(rep.per_event_totals().mean()) for rep in reps]
    cis = [ci(rep) for rep in reps]
    heat = [rep.resilience["heat"] for rep in reps]
    # no statistically significant increase between neighbouring densities
    total_ok = all(means[i + 1] <= cis[i][1] for i in range(len(reps) - 1))
    heat_ok = all(b <= a for a, b in zip(heat, heat[1:])) and heat[-1] < heat[0]
    ok = total_ok and heat_ok
    detail = "; ".join(f"d={d:g}: LS {m:.4f} CI [{c[0]:.4f}, {c[1]:.4f}], R^heat {h:.4f}" for d, m, c, h in zip(DENSITIES, means, cis, heat))
    verdict(capsys, "C6", ok, detail)


# --------------------------------------------------------------------------- 7


def test_c7_heat_isolation(capsys):
    assert case_mes(0.0).coupling_points == ()
    rep = mc(0.0, "high-heating")
    on_el = carrier_grid_impact(rep.sci, "heat", "el")
    on_gas = carrier_grid_impact(rep.sci, "heat", "gas")
    on_heat = carrier_grid_impact(rep.sci, "heat", "heat")
    ok = abs(on_el["sci_centered"]) <= 0.05 and abs(on_gas["sci_centered"]) <= 0.05 and on_heat["sci_centered"] > 0
    verdict(
        capsys, "C7", ok,
        f"heat->el {on_el['sci_centered']:.4f}, heat->gas {on_gas['sci_centered']:.4f}, heat->heat {on_heat['sci_centered']:.4f} "
        f"({on_heat['observed']} heat components observed broken, {rep.n_events} events)",
    )


# --------------------------------------------------------------------------- 8


def test_c8_stopping_rule(capsys):
    stationary = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        stationary.append(kalman_stopping([2.0] * 5000))
        stationary.append(kalman_stopping(5.0 + rng.normal(0.0, 1.0, 20000)))
    drifts = []
    for seed, (start, length, factor) in itertools.product(range(3), ((950, 200, 50.0), (980, 100, 100.0))):
        v = 5.0 + np.random.default_rng(seed).normal(0.0, 1.0, 20000)
        v[start : start + length] *= factor
        drifts.append((start + length, kalman_stopping(v)))
    cap = StoppingConfig().max_events
    ok = all(n == 1000 for n in stationary) and all(1000 < stop < cap and stop >= end for end, stop in drifts)
    verdict(capsys, "C8", ok, f"stationary streams stop at {sorted(set(stationary))}; drift (end, stop) {drifts}")


# --------------------------------------------------------------------------- 9


def test_c9_reproducibility(capsys, tmp_path):
    doc = yaml.safe_load(open(os.path.join(os.path.dirname(__file__), "..", "configs", "sample.yaml")))
    doc.update(densities=[1.0], presets=["high-gas"])
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    runs = []
    for name, extra in (("a", []), ("b", []), ("c", ["--workers", "2"])):
        out = tmp_path / name
        assert cli.main(["simulate", "--config", str(path), "--out", str(out), *extra]) == 0
        runs.append(out / "d1_high-gas")
    files = sorted(p.name for p in runs[0].iterdir())
    diff = [(f, r.parent.name) for f in files for r in runs[1:] if (runs[0] / f).read_bytes() != (r / f).read_bytes()]
    ok = len(files) >= 8 and not diff
    verdict(capsys, "C9", ok, f"{len(files)} files compared across two serial runs and one 2-worker run; differing: {diff}")
