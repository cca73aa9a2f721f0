import pytest

from conftest import case_mes
from mesres.errors import GenerationError
from mesres.model.network import Carrier, CPKind
from mesres.synth import SynthConfig, bfs_tree, generate_mes, productive_nodes, rural_mv_grid


def test_base_grid():
    el = rural_mv_grid()
    assert len(el.buses) == 20
    assert len(el.lines) == 20  # a radial pair of feeders plus one tie
    assert len(bfs_tree(el)) == 19  # parent link of every bus but the slack


def test_generation_is_deterministic():
    a = generate_mes(rural_mv_grid(), SynthConfig(seed=3).with_density(1.0, seed=3))
    b = generate_mes(rural_mv_grid(), SynthConfig(seed=3).with_density(1.0, seed=3))
    assert a == b
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("carrier", [Carrier.GAS, Carrier.HEAT])
def test_productive_nodes_nest(carrier):
    el = rural_mv_grid()
    prev = set()
    for rho in (0.1, 0.25, 0.5, 0.75, 1.0):
        cur = set(productive_nodes(el, carrier, rho, seed=0))
        assert prev <= cur
        prev = cur
    assert len(prev) == len(el.buses) - 1 or len(prev) == len(el.buses)


def test_derived_networks_are_connected_trees():
    net = case_mes(1.0)
    for sub in (net.gas, net.heat):
        assert len(sub.pipes) == len(sub.junctions) - 1
        assert sub.slack_junction == net.electricity.slack_bus


def test_density_zero_has_no_coupling_points():
    assert case_mes(0.0).coupling_points == ()


def test_coupling_point_count_scales_with_density():
    counts = {d: {k: sum(cp.kind is k for cp in case_mes(d).coupling_points) for k in CPKind} for d in (0.5, 1.0, 2.0)}
    n_heat = len({d.junction for d in case_mes(1.0).heat.demands})
    n_gas = len({d.junction for d in case_mes(1.0).gas.demands})
    assert counts[1.0][CPKind.P2H] == n_heat
    assert counts[1.0][CPKind.P2G] == n_gas
    assert counts[2.0][CPKind.P2H] == 2 * n_heat
    assert counts[0.5][CPKind.P2H] == round(0.5 * n_heat)


def test_carrier_networks_shared_across_densities():
    a, b = case_mes(0.0), case_mes(2.0)
    assert a.gas == b.gas
    assert a.heat == b.heat
    assert a.electricity == b.electricity


def test_invalid_densities():
    with pytest.raises(GenerationError):
        SynthConfig(gas_density=0.0)
    with pytest.raises(GenerationError):
        SynthConfig.with_density(-1.0)
