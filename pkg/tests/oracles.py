"""Independent reference computations used by the test suite.

None of these call into the load-shedding optimiser or the metric code they
check.  They use the flow model only to evaluate candidate operating points.
"""

import heapq
import itertools
import math

import numpy as np

from mesres.errors import MesError
from mesres.flow.solver import Controls, build_state, controls_vector, newton
from mesres.flow.system import FlowSystem
from mesres.model.graph import Edge, EdgeType, WeightedMultigraph
from mesres.model.network import Carrier
from mesres.model.degrade import healthy


# --------------------------------------------------------------------------- load shedding


class GridSearchShedding:
    """Exhaustive search over shedding coefficients on a grid.

    Only valid for networks without coupling points and without dispatchable
    units, where the shedding coefficients are the only controls and each
    carrier can be searched on its own.  Candidates are visited in order of
    increasing objective; the first one meeting every limit is the grid
    optimum.
    """

    def __init__(self, net, bounds, step=0.01):
        if net.coupling_points:
            raise ValueError("grid search oracle needs a network without coupling points")
        self.net, self.bounds, self.step = net, bounds, step
        self.power = net.demand_power_mw()
        fs = FlowSystem(healthy(net))
        x, _, _ = newton(fs, fs.u_nominal())
        st = build_state(fs, x, fs.u_nominal())
        self.caps = {
            Carrier.ELECTRICITY: st.slack_p_mw,
            Carrier.GAS: st.gas_slack_import_kg_s,
            Carrier.HEAT: st.heat_root_supply_mw,
        }

    def _ok(self, st, c, tol=1e-5):
        b = self.bounds
        if c is Carrier.ELECTRICITY:
            slack = list(st.bus_ids).index(self.net.electricity.slack_bus)
            vm = np.delete(st.vm_pu, slack)
            return bool(
                np.all(vm >= b.v_min - tol)
                and np.all(vm <= b.v_max + tol)
                and np.all(st.loading_percent <= b.lp_max + 100 * tol)
                and st.slack_p_mw <= self.caps[c] + tol
            )
        if c is Carrier.GAS:
            lo, hi = b.pressure_limits(self.net.gas.slack_pressure_pa)
            p = st.pressure_pa
            return bool(np.all(p >= lo * (1 - tol)) and np.all(p <= hi * (1 + tol)) and st.gas_slack_import_kg_s <= self.caps[c] + 1e-7)
        T = st.temperature_k
        return bool(np.all(T >= b.t_min - tol) and np.all(T <= b.t_max + tol) and st.heat_root_supply_mw <= self.caps[c] + tol)

    def feasible(self, fs, c, shed) -> bool:
        u = controls_vector(fs, Controls(shed=shed))
        try:
            x, _, _ = newton(fs, u, max_iter=30)
        except MesError:
            return False
        return self._ok(build_state(fs, x, u), c)

    def carrier_optimum(self, dnet, c):
        """Grid-optimal shed power of carrier ``c`` (MW) and number of evaluated points; None when infeasible."""
        dropped = {d for (cc, d) in dnet.dropped_demands if cc is c}
        fixed = sum(self.power[c][d] for d in dropped)
        ids = [d for d in self.power[c] if d not in dropped]
        if not ids:
            return fixed, 0
        fs = FlowSystem(dnet, carriers=(c,))
        if not self.feasible(fs, c, {(c, d): 1.0 for d in ids}):
            return None, 1
        grid = np.round(np.arange(0.0, 1.0 + self.step / 2, self.step), 10)
        pts = sorted(itertools.product(grid, repeat=len(ids)), key=lambda s: sum(v * self.power[c][d] for v, d in zip(s, ids)))
        for n, s in enumerate(pts, 1):
            shed = {(c, d): float(v) for d, v in zip(ids, s)}
            if self.feasible(fs, c, shed):
                return fixed + sum(v * self.power[c][d] for d, v in zip(ids, s)), n
        return None, len(pts)

    def grid_step_objective(self, c) -> float:
        """Largest objective change from moving every coefficient of ``c`` by one grid step."""
        return self.step * sum(self.power[c].values())


# --------------------------------------------------------------------------- graph metrics


def simple_paths(n, edges, s, t):
    """All simple paths from ``s`` to ``t`` as lists of edge indices (edges are (u, v, w))."""
    out = []
    adj = [[] for _ in range(n)]
    for k, (u, v, _) in enumerate(edges):
        adj[u].append((v, k))

    def rec(node, seen, path):
        if node == t:
            out.append(list(path))
            return
        for v, k in adj[node]:
            if v not in seen:
                seen.add(v)
                path.append(k)
                rec(v, seen, path)
                path.pop()
                seen.discard(v)

    rec(s, {s}, [])
    return out


def brute_force_metrics(n, edges):
    """Distances, path counts, node and edge betweenness by path enumeration.

    Path lengths are rounded to 12 decimals before comparison.
    """
    dist = np.full((n, n), math.inf)
    count = np.zeros((n, n), dtype=int)
    node_bc = np.zeros(n)
    edge_bc = np.zeros(len(edges))
    for s in range(n):
        dist[s, s] = 0.0
        count[s, s] = 1
        for t in range(n):
            if s == t:
                continue
            paths = simple_paths(n, edges, s, t)
            if not paths:
                continue
            lengths = [round(sum(edges[k][2] for k in p), 12) for p in paths]
            best = min(lengths)
            shortest = [p for p, L in zip(paths, lengths) if L == best]
            dist[s, t] = best
            count[s, t] = len(shortest)
            for p in shortest:
                inner = {edges[k][1] for k in p[:-1]}
                for v in inner:
                    node_bc[v] += 1.0 / len(shortest)
                for k in p:
                    edge_bc[k] += 1.0 / len(shortest)
    return dist, count, node_bc, edge_bc


def wiener(n, edges, removed=None):
    """Sum of shortest distances over ordered reachable pairs and the reachability matrix."""
    keep = [e for e in edges if removed not in (e[0], e[1])]
    d = floyd_warshall(n, keep)
    mask = np.isfinite(d) & ~np.eye(n, dtype=bool)
    if removed is not None:
        mask[removed, :] = False
        mask[:, removed] = False
    return float(d[mask].sum()), mask


def floyd_warshall(n, edges):
    d = np.full((n, n), math.inf)
    np.fill_diagonal(d, 0.0)
    for u, v, w in edges:
        d[u, v] = min(d[u, v], w)
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def dijkstra_distances(n, edges, s):
    d = [math.inf] * n
    d[s] = 0.0
    heap = [(0.0, s)]
    while heap:
        du, u = heapq.heappop(heap)
        if du > d[u]:
            continue
        for a, b, w in edges:
            if a == u and du + w < d[b]:
                d[b] = du + w
                heapq.heappush(heap, (d[b], b))
    return d


# --------------------------------------------------------------------------- random test graphs


def make_graph(n, edges):
    """Multigraph on nodes 0..n-1 from ``(u, v, weight)`` triples; edge keys are list positions."""
    g = WeightedMultigraph(nodes=[(i, Carrier.ELECTRICITY) for i in range(n)])
    g.edges = [Edge((u, Carrier.ELECTRICITY), (v, Carrier.ELECTRICITY), k, EdgeType.LINE, float(w), f"el.line.{k}") for k, (u, v, w) in enumerate(edges)]
    return g


def both_ways(pairs):
    out = []
    for u, v, w in pairs:
        out += [(u, v, w), (v, u, w)]
    return out


def random_graph(rng):
    """Random directed multigraph of 2 to 10 nodes; mostly integer weights so equal-length paths occur."""
    n = int(rng.integers(2, 11))
    m = int(rng.integers(n - 1, 2 * n + 1))
    edges = []
    for _ in range(m):
        u, v = rng.choice(n, size=2, replace=False)
        w = float(rng.integers(1, 4)) if rng.random() < 0.7 else round(float(rng.uniform(0.1, 3.0)), 3)
        edges.append((int(u), int(v), w))
        if rng.random() < 0.5:
            edges.append((int(v), int(u), w))
        if rng.random() < 0.1:
            edges.append((int(u), int(v), w))  # parallel edge
    return n, edges
