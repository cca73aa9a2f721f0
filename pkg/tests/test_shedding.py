import pytest

from conftest import toy_mes
from mesres.bounds import OperationalBounds
from mesres.errors import ConfigError
from mesres.flow.solver import Controls, solve_multi_energy_flow
from mesres.model.degrade import degrade, healthy
from mesres.model.network import Carrier
from mesres.shedding import LoadShedder, base_caps, carrier_groups, evaluate_objective, optimize_load_shedding

TOL = OperationalBounds().tol


def total_demand(net):
    return {c: sum(v.values()) for c, v in net.demand_power_mw().items()}


def check_limits(net, sol, failed, bounds=OperationalBounds()):
    """Re-solve the network at the returned controls and check every limit from scratch."""
    dnet = degrade(net, failed)
    st = solve_multi_energy_flow(dnet, Controls(shed=sol.shed, dispatch=sol.dispatch))
    caps = base_caps(net)
    slack = list(st.bus_ids).index(net.electricity.slack_bus)
    vm = [v for i, v in enumerate(st.vm_pu) if i != slack]
    assert all(bounds.v_min - TOL <= v <= bounds.v_max + TOL for v in vm)
    assert all(lp <= bounds.lp_max + 1e-3 for lp in st.loading_percent)
    lo, hi = bounds.pressure_limits(net.gas.slack_pressure_pa)
    assert all(lo * (1 - TOL) <= p <= hi * (1 + TOL) for p in st.pressure_pa)
    assert all(bounds.t_min - TOL <= t <= bounds.t_max + TOL for t in st.temperature_k)
    assert st.slack_p_mw <= caps[Carrier.ELECTRICITY] + 1e-5
    assert st.gas_slack_import_kg_s <= caps[Carrier.GAS] + 1e-7


def test_evaluate_objective():
    assert evaluate_objective({"a": 0.5, "b": 0.0}, {"a": 2.0, "b": 3.0}) == 1.0
    assert evaluate_objective({"a": 1.0, "b": 1.0}, {"a": 2.0, "b": 3.0}) == 5.0


def test_healthy_network_sheds_nothing(toy_units):
    sol = LoadShedder(toy_units).solve(healthy(toy_units))
    assert sol.ls == 0.0
    assert sol.method == "nominal"
    assert sol.feasible


def test_total_disconnection_sheds_all(toy):
    failed = {"el.line.a", "el.line.c", "gas.pipe.a", "gas.pipe.c", "heat.pipe.a"}
    sol = LoadShedder(toy)(failed)
    want = total_demand(toy)
    for c in Carrier:
        assert sol.ls_by_carrier[c] == pytest.approx(want[c])


def test_overloaded_line_needs_shedding():
    net = toy_mes(0.02, 0.05)
    sol = LoadShedder(net)({"el.line.a"})
    assert 0.0 < sol.ls_by_carrier[Carrier.ELECTRICITY] < 0.9
    assert sol.ls_by_carrier[Carrier.HEAT] == 0.0
    check_limits(net, sol, {"el.line.a"})


def test_gas_pressure_shedding():
    net = toy_mes(0.02, 0.05)
    sol = LoadShedder(net)({"gas.pipe.c"})
    assert sol.ls_by_carrier[Carrier.GAS] > 0.0
    check_limits(net, sol, {"gas.pipe.c"})


def test_monotone_in_failed_set():
    net = toy_mes(0.02, 0.05)
    shed = LoadShedder(net)
    chain = [set(), {"el.line.a"}, {"el.line.a", "el.line.b"}, {"el.line.a", "el.line.b", "el.line.c"}]
    ls = [shed(f).ls for f in chain]
    assert all(a <= b + 1e-9 for a, b in zip(ls, ls[1:]))


def test_deterministic_and_cached():
    net = toy_mes(0.02, 0.05)
    a = LoadShedder(net)({"el.line.c", "gas.pipe.a"})
    shedder = LoadShedder(net)
    b = shedder({"el.line.c", "gas.pipe.a"})
    assert a.to_dict() == b.to_dict()
    shedder({"gas.pipe.a", "el.line.c"})
    assert shedder.cache_size() == 1


def test_coupled_network_with_units(toy_units):
    failed = {"el.line.a"}
    sol = optimize_load_shedding(degrade(toy_units, failed))
    assert sol.feasible
    check_limits(toy_units, sol, failed)


def test_carrier_groups(toy, toy_units):
    assert len(carrier_groups(healthy(toy))) == 3
    (group,) = carrier_groups(healthy(toy_units))
    assert set(group) == set(Carrier)
    assert len(carrier_groups(degrade(toy_units, {"cp.chp"}))) == 3


def test_bounds_validation():
    with pytest.raises(ConfigError):
        OperationalBounds(v_min=1.2)
    with pytest.raises(ValueError):
        LoadShedder(toy_mes(), on_stall="ignore")
