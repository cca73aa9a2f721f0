"""Complex-network metrics on the weighted multigraph.

Shortest paths are directed and use the edge weights.  Parallel edges count
as distinct paths.  Weights are rounded to 12 decimals so that ties between
equal-length paths are detected exactly.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from mesres.errors import ContractViolation, KatzDivergenceError
from mesres.model.graph import WeightedMultigraph
from mesres.model.network import component_kind

log = logging.getLogger(__name__)

ROUND = 12
#: zero weights are raised to this so that shortest paths stay simple
MIN_WEIGHT = 1e-9
KATZ_ALPHA = 0.1
KATZ_BETA = 1.0
KATZ_TOL = 1e-10


@dataclass(frozen=True)
class _Arc:
    source: int
    target: int
    key: int
    weight: float


def _arcs(graph: WeightedMultigraph, exclude=None):
    idx = graph.index()
    out = []
    for e in graph.edges:
        if e.weight < 0:
            raise ContractViolation(f"edge {e.key} has negative weight {e.weight}")
        u, v = idx[e.source], idx[e.target]
        if exclude is not None and exclude in (u, v):
            continue
        out.append(_Arc(u, v, e.key, round(max(e.weight, MIN_WEIGHT), ROUND)))
    return out


def _adjacency(n, arcs):
    adj = [[] for _ in range(n)]
    for a in arcs:
        adj[a.source].append(a)
    return adj


def _dijkstra(adj, s):
    """Distances, path counts, predecessor arcs and settling order from ``s``."""
    n = len(adj)
    dist = [math.inf] * n
    sigma = [0] * n
    pred = [[] for _ in range(n)]
    dist[s] = 0.0
    sigma[s] = 1
    done = [False] * n
    order = []
    heap = [(0.0, s)]
    while heap:
        d, v = heapq.heappop(heap)
        if done[v] or d > dist[v]:
            continue
        done[v] = True
        order.append(v)
        for a in adj[v]:
            w = a.target
            nd = round(d + a.weight, ROUND)
            if nd < dist[w]:
                dist[w] = nd
                sigma[w] = sigma[v]
                pred[w] = [a]
                heapq.heappush(heap, (nd, w))
            elif nd == dist[w] and not done[w]:
                sigma[w] += sigma[v]
                pred[w].append(a)
    return dist, sigma, pred, order


@dataclass
class ShortestPaths:
    nodes: list
    dist: np.ndarray  # [s, t], inf when unreachable
    count: np.ndarray  # number of shortest paths (object array of ints)


def shortest_paths(graph: WeightedMultigraph) -> ShortestPaths:
    """All-pairs shortest distances and path multiplicities."""
    n = len(graph.nodes)
    adj = _adjacency(n, _arcs(graph))
    dist = np.full((n, n), math.inf)
    count = np.zeros((n, n), dtype=object)
    for s in range(n):
        d, sig, _, _ = _dijkstra(adj, s)
        dist[s] = d
        count[s] = sig
    return ShortestPaths(list(graph.nodes), dist, count)


def betweenness(graph: WeightedMultigraph) -> tuple[np.ndarray, dict]:
    """Node betweenness (array over ``graph.nodes``) and edge betweenness (edge key -> value).

    Sums over ordered pairs, unnormalised, endpoints excluded for nodes.
    """
    n = len(graph.nodes)
    arcs = _arcs(graph)
    adj = _adjacency(n, arcs)
    cb = np.zeros(n)
    ce = {a.key: 0.0 for a in arcs}
    for s in range(n):
        _, sigma, pred, order = _dijkstra(adj, s)
        delta = [0.0] * n
        for w in reversed(order):
            for a in pred[w]:
                v = a.source
                c = sigma[v] / sigma[w] * (1.0 + delta[w])
                ce[a.key] += c
                delta[v] += c
            if w != s:
                cb[w] += delta[w]
    return cb, ce


def node_betweenness(graph: WeightedMultigraph, node=None):
    cb, _ = betweenness(graph)
    if node is None:
        return dict(zip(graph.nodes, cb))
    return float(cb[graph.index()[node]])


def edge_betweenness(graph: WeightedMultigraph, key=None):
    _, ce = betweenness(graph)
    return ce if key is None else ce[key]


def node_degree(graph: WeightedMultigraph) -> dict:
    """Incident edge count per node, each directed edge counted once at both ends."""
    deg = dict.fromkeys(graph.nodes, 0)
    for e in graph.edges:
        deg[e.source] += 1
        deg[e.target] += 1
    return deg


def edge_degree(graph: WeightedMultigraph) -> dict:
    deg = node_degree(graph)
    return {e.key: deg[e.source] + deg[e.target] for e in graph.edges}


def degree(graph: WeightedMultigraph, element):
    """Degree of a node ``(unit, carrier)`` or of an edge given by its key."""
    if isinstance(element, tuple):
        return node_degree(graph)[element]
    return edge_degree(graph)[element]


def _wiener(n, arcs, skip=None):
    adj = _adjacency(n, arcs)
    total = 0.0
    reach = np.zeros((n, n), dtype=bool)
    for s in range(n):
        if s == skip:
            continue
        d, _, _, _ = _dijkstra(adj, s)
        for t, x in enumerate(d):
            if t != s and t != skip and x < math.inf:
                total += x
                reach[s, t] = True
    return total, reach


def closeness_vitality(graph: WeightedMultigraph) -> tuple[np.ndarray, np.ndarray]:
    """Wiener-index drop when removing each node, and a disconnection flag.

    The Wiener index sums distances over ordered reachable pairs.  When the
    removal makes a previously reachable pair unreachable the vitality is
    reported as ``inf`` and flagged.
    """
    n = len(graph.nodes)
    arcs = _arcs(graph)
    base, reach = _wiener(n, arcs)
    vit = np.zeros(n)
    flag = np.zeros(n, dtype=bool)
    for v in range(n):
        sub = _arcs(graph, exclude=v)
        w, r = _wiener(n, sub, skip=v)
        keep = np.ones(n, dtype=bool)
        keep[v] = False
        if np.any(reach[np.ix_(keep, keep)] & ~r[np.ix_(keep, keep)]):
            vit[v], flag[v] = math.inf, True
        else:
            vit[v] = round(base - w, ROUND)
    return vit, flag


def katz_matrix(graph: WeightedMultigraph) -> np.ndarray:
    """``A[v, u]`` = number of edges from ``u`` to ``v``."""
    idx = graph.index()
    a = np.zeros((len(graph.nodes), len(graph.nodes)))
    for e in graph.edges:
        a[idx[e.target], idx[e.source]] += 1.0
    return a


def katz_centrality(graph: WeightedMultigraph, alpha=KATZ_ALPHA, beta=KATZ_BETA, tol=KATZ_TOL, max_iter=100000) -> np.ndarray:
    """Fixed point of ``x = alpha * A x + beta`` by iteration."""
    a = katz_matrix(graph)
    return katz_iterate(a, alpha, beta, tol, max_iter)


def katz_iterate(a: np.ndarray, alpha, beta, tol=KATZ_TOL, max_iter=100000) -> np.ndarray:
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    rho = float(np.max(np.abs(np.linalg.eigvals(a)))) if n else 0.0
    if alpha < 0 or alpha * rho >= 1.0:
        raise KatzDivergenceError(f"alpha={alpha} needs to be below 1/spectral radius = {1 / rho if rho else math.inf:.6g}")
    x = np.full(n, float(beta))
    for _ in range(max_iter):
        nxt = alpha * (a @ x) + beta
        if np.max(np.abs(nxt - x)) < tol:
            # one more step gives error well below tol for a contraction
            return alpha * (a @ nxt) + beta
        x = nxt
    raise KatzDivergenceError(f"Katz iteration did not converge in {max_iter} steps")


# --------------------------------------------------------------------------- tables


@dataclass
class MetricTable:
    nodes: pd.DataFrame
    edges: pd.DataFrame
    #: per failable component, the metrics of the graph elements it owns
    components: pd.DataFrame = field(default_factory=pd.DataFrame)


NODE_METRICS = ("betweenness", "degree", "closeness_vitality", "katz")
EDGE_METRICS = ("betweenness", "degree")


def compute_metrics(graph: WeightedMultigraph, alpha=KATZ_ALPHA, beta=KATZ_BETA) -> MetricTable:
    cb, ce = betweenness(graph)
    ndeg = node_degree(graph)
    edeg = edge_degree(graph)
    vit, flag = closeness_vitality(graph)
    katz = katz_centrality(graph, alpha, beta)
    nodes = pd.DataFrame(
        {
            "unit": [u for u, _ in graph.nodes],
            "carrier": [c.short for _, c in graph.nodes],
            "betweenness": cb,
            "degree": [ndeg[n] for n in graph.nodes],
            "closeness_vitality": vit,
            "vitality_disconnects": flag,
            "katz": katz,
            "attached": [";".join(graph.attached.get(n, [])) for n in graph.nodes],
        }
    )
    edges = pd.DataFrame(
        {
            "key": [e.key for e in graph.edges],
            "source": [f"{e.source[0]}/{e.source[1].short}" for e in graph.edges],
            "target": [f"{e.target[0]}/{e.target[1].short}" for e in graph.edges],
            "type": [e.edge_type.value for e in graph.edges],
            "weight": [e.weight for e in graph.edges],
            "component": [e.component for e in graph.edges],
            "betweenness": [ce[e.key] for e in graph.edges],
            "degree": [edeg[e.key] for e in graph.edges],
        }
    )
    return MetricTable(nodes, edges, component_metrics(nodes, edges))


def component_metrics(nodes: pd.DataFrame, edges: pd.DataFrame) -> pd.DataFrame:
    """Metrics per failable component.

    Branch components (lines, pipes, coupling points) own one or more
    directed edges: betweenness is the sum over them (group betweenness for
    coupling points) and degree the mean.  Generators, sources and producers
    take the metrics of the node they are attached to.
    """
    rows = []
    for cid, grp in edges.groupby("component", sort=False):
        rows.append({"component": cid, "betweenness": float(grp["betweenness"].sum()), "degree": float(grp["degree"].mean())})
    for _, r in nodes.iterrows():
        for label in filter(None, r["attached"].split(";")):
            if label.startswith("demand:"):
                continue
            rows.append(
                {
                    "component": label,
                    "betweenness": r["betweenness"],
                    "degree": float(r["degree"]),
                    "closeness_vitality": r["closeness_vitality"],
                    "katz": r["katz"],
                }
            )
    out = pd.DataFrame(rows, columns=["component", *NODE_METRICS])
    out.insert(1, "kind", [component_kind(c) for c in out["component"]])
    return out


def export_correlation_data(metric_table: MetricTable, impact_report) -> pd.DataFrame:
    """Long-format (component, class, metric, value, carrier, impact) rows.

    Only components observed broken contribute; metrics a component does not
    have are skipped.
    """
    cols = ["component", "kind", "metric", "metric_value", "carrier", "sci", "sci_centered"]
    sci = impact_report.sci if impact_report is not None else None
    if sci is None or len(sci) == 0:
        return pd.DataFrame(columns=cols)
    comp = metric_table.components.set_index("component")
    obs = sci[sci["events"] > 0]
    missing = sorted(set(obs["component"]) - set(comp.index))
    if missing:
        log.warning("no metrics for %d components: %s", len(missing), ", ".join(missing[:5]))
    rows = []
    for r in obs.itertuples(index=False):
        if r.component not in comp.index:
            continue
        m = comp.loc[r.component]
        for name in NODE_METRICS:
            val = m[name]
            if pd.isna(val):
                continue
            rows.append((r.component, m["kind"], name, float(val), r.carrier, r.sci, r.sci_centered))
    return pd.DataFrame(rows, columns=cols)
