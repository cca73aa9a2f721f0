"""Build a generated multi-energy network, solve the base flow and shed load after one failure."""
import sys

from mesres.flow.solver import solve_multi_energy_flow
from mesres.metrics import compute_metrics
from mesres.model.graph import build_topology_graph
from mesres.shedding import LoadShedder
from mesres.synth import SynthConfig, generate_mes, rural_mv_grid

density = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
net = generate_mes(rural_mv_grid(), SynthConfig(seed=0).with_density(density))
print(f"{net.name}: {len(net.component_ids)} components, {len(net.coupling_points)} coupling points")

state = solve_multi_energy_flow(net)
print(f"base flow: {state.iterations} Newton iterations, residual {state.residual_norm:.2e}")
print(f"voltage range [{state.vm_pu.min():.4f}, {state.vm_pu.max():.4f}] pu, slack import {state.slack_p_mw:.3f} MW")

shedder = LoadShedder(net, on_stall="fallback")
for cid in net.component_ids[:6]:
    sol = shedder({cid})
    shed = ", ".join(f"{c.short}={v:.3f}" for c, v in sol.ls_by_carrier.items())
    print(f"fail {cid:<16} LS {sol.ls:7.3f} MW ({shed}) via {sol.method}")

table = compute_metrics(build_topology_graph(net))
top = table.components.sort_values("betweenness", ascending=False).head(5)
print("\nmost central components:")
print(top[["component", "betweenness", "degree"]].to_string(index=False))
