import math
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from oracles import brute_force_metrics, both_ways, dijkstra_distances, floyd_warshall, make_graph, random_graph, wiener
from mesres.errors import KatzDivergenceError
from mesres.metrics import (
    MIN_WEIGHT,
    ROUND,
    betweenness,
    closeness_vitality,
    compute_metrics,
    degree,
    export_correlation_data,
    katz_centrality,
    katz_matrix,
    shortest_paths,
)
from mesres.model.graph import Edge, EdgeType, WeightedMultigraph, build_topology_graph
from mesres.model.network import Carrier

EL = Carrier.ELECTRICITY


# --------------------------------------------------------------------------- small known cases


def test_path_of_three():
    g = make_graph(3, both_ways([(0, 1, 1.0), (1, 2, 1.0)]))
    cb, ce = betweenness(g)
    np.testing.assert_allclose(cb, [0.0, 2.0, 0.0])
    assert all(v == 2.0 for v in ce.values())
    vit, flag = closeness_vitality(g)
    assert vit[1] == math.inf and flag[1]
    assert vit[0] == pytest.approx(6.0)  # pairs (0,1),(1,0),(0,2),(2,0) lose 1+1+2+2
    assert not flag[0]
    assert degree(g, (1, EL)) == 4
    assert degree(g, 0) == 6


def test_parallel_edges_count_as_distinct_paths():
    g = make_graph(3, [(0, 1, 1.0), (0, 1, 1.0), (1, 2, 1.0)])
    sp = shortest_paths(g)
    assert sp.count[0, 2] == 2
    _, ce = betweenness(g)
    assert ce[0] == pytest.approx(1.0) and ce[1] == pytest.approx(1.0)
    assert ce[2] == pytest.approx(2.0)


def test_zero_weights_keep_paths_simple():
    g = make_graph(3, both_ways([(0, 1, 0.0), (1, 2, 0.0)]))
    sp = shortest_paths(g)
    assert sp.count[0, 2] == 1
    assert betweenness(g)[0][1] == pytest.approx(2.0)


def test_katz_closed_forms():
    g = make_graph(2, [(0, 1, 1.0)])
    np.testing.assert_allclose(katz_centrality(g, alpha=0.0, beta=2.0), [2.0, 2.0])
    np.testing.assert_allclose(katz_centrality(g, alpha=0.5, beta=1.0), [1.0, 1.5], atol=1e-10)
    cyc = make_graph(2, [(0, 1, 1.0), (1, 0, 1.0)])
    with pytest.raises(KatzDivergenceError):
        katz_centrality(cyc, alpha=1.0)


def test_negative_vitality_possible():
    # removing the hub 2 of 0 -> 2 -> 1 leaves the direct 0 -> 1 edge, which is longer
    g = make_graph(3, [(0, 1, 5.0), (0, 2, 1.0), (2, 1, 1.0)])
    vit, flag = closeness_vitality(g)
    # base: d01=2, d02=1, d21=1 -> 4 ; without 2: d01=5 -> 5
    assert vit[2] == pytest.approx(-1.0)
    assert not flag[2]


# --------------------------------------------------------------------------- randomised oracle comparison


@pytest.mark.parametrize("seed", range(100))
def test_random_graph_against_oracles(seed):
    rng = np.random.default_rng(seed)
    n, edges = random_graph(rng)
    g = make_graph(n, edges)

    dist, count, node_bc, edge_bc = brute_force_metrics(n, edges)
    sp = shortest_paths(g)
    np.testing.assert_array_equal(sp.dist, dist)
    np.testing.assert_array_equal(sp.count.astype(int), count)
    fw = floyd_warshall(n, edges)
    np.testing.assert_allclose(np.where(np.isinf(fw), -1, fw), np.where(np.isinf(dist), -1, dist), atol=1e-9)
    for s in range(n):
        np.testing.assert_allclose(dijkstra_distances(n, edges, s), fw[s], atol=1e-9)

    cb, ce = betweenness(g)
    np.testing.assert_allclose(cb, node_bc, atol=1e-9)
    np.testing.assert_allclose([ce[k] for k in range(len(edges))], edge_bc, atol=1e-9)

    vit, flag = closeness_vitality(g)
    base, reach = wiener(n, edges)
    for v in range(n):
        w, r = wiener(n, edges, removed=v)
        keep = np.arange(n) != v
        lost = np.any(reach[np.ix_(keep, keep)] & ~r[np.ix_(keep, keep)])
        assert flag[v] == lost
        if lost:
            assert vit[v] == math.inf
        else:
            assert vit[v] == pytest.approx(base - w, abs=1e-9)

    a = np.zeros((n, n))
    for u, v, _ in edges:
        a[v, u] += 1
    np.testing.assert_array_equal(katz_matrix(g), a)
    rho = max(abs(np.linalg.eigvals(a)))
    alpha = 0.1 if 0.1 * rho < 0.9 else 0.5 / rho
    want = np.linalg.solve(np.eye(n) - alpha * a, np.ones(n))
    np.testing.assert_allclose(katz_centrality(g, alpha=alpha), want, rtol=0, atol=1e-8)


# --------------------------------------------------------------------------- tables


def test_metric_table_and_correlation_export(toy_units):
    g = build_topology_graph(toy_units)
    table = compute_metrics(g)
    assert len(table.nodes) == len(g.nodes)
    assert len(table.edges) == len(g.edges)
    comp = table.components.set_index("component")
    assert set(comp.index) == set(toy_units.component_ids)
    chp_edges = table.edges[table.edges["component"] == "cp.chp"]
    assert comp.loc["cp.chp", "betweenness"] == pytest.approx(chp_edges["betweenness"].sum())
    gen_node = table.nodes[(table.nodes["unit"] == 2) & (table.nodes["carrier"] == "el")].iloc[0]
    assert comp.loc["el.gen.g", "katz"] == gen_node["katz"]

    sci = pd.DataFrame(
        [(c, "el", carrier, 1 if c in ("el.line.a", "el.gen.g") else 0, 0.0, 0.0, 2.0, 1.0)
         for c in toy_units.component_ids for carrier in ("el", "gas", "heat")],
        columns=["component", "group", "carrier", "events", "sci_in", "sci_nin", "sci", "sci_centered"],
    )
    out = export_correlation_data(table, SimpleNamespace(sci=sci))
    # a line has betweenness and degree, a generator all four metrics; three carriers each
    assert len(out) == (2 + 4) * 3
    assert set(out["component"]) == {"el.line.a", "el.gen.g"}


def test_betweenness_agrees_with_networkx(mes1):
    nx = pytest.importorskip("networkx")
    g = build_topology_graph(mes1)
    idx = g.index()
    G = nx.MultiDiGraph()
    G.add_nodes_from(range(len(g.nodes)))
    for e in g.edges:
        G.add_edge(idx[e.source], idx[e.target], weight=round(max(e.weight, MIN_WEIGHT), ROUND))
    ref = nx.betweenness_centrality(G, weight="weight", normalized=False)
    cb, _ = betweenness(g)
    np.testing.assert_allclose(cb, [ref[i] for i in range(len(g.nodes))], atol=1e-9)
