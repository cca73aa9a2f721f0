import numpy as np
import pytest

from conftest import case_mes, toy_mes
from mesres.errors import DivergenceError
from mesres.flow.solver import Controls, ac_residuals, conservation_report, newton, solve_multi_energy_flow
from mesres.flow.system import FlowSystem
from mesres.model.degrade import degrade, healthy
from mesres.model.network import Bus, Carrier, ElectricDemand, ElectricityNetwork, Line, MultiEnergyNetwork

# closed-form receiving-end voltage of a 2-bus feeder (r=0.02, x=0.04 pu, load 0.5+0.2j pu)
TWO_BUS_VM = 0.9815283817937066


def fd_jacobian_error(fs, x, u):
    """Largest deviation of the analytic Jacobian from central differences, relative to its largest entry."""
    jac = fs.jacobian(x, u)[0].toarray()
    fd = np.zeros_like(jac)
    for j in range(x.size):
        h = 1e-6 * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        # five-point stencil: O(h^4) truncation, needed where the heat demand model is strongly curved
        fd[:, j] = (8 * (fs.residual(x + e, u) - fs.residual(x - e, u)) - fs.residual(x + 2 * e, u) + fs.residual(x - 2 * e, u)) / (12 * h)
    return np.abs(jac - fd).max() / np.abs(jac).max()


def random_states(fs, n, seed):
    u = fs.u_nominal()
    x0, _, _ = newton(fs, u)
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield x0 * (1 + 0.05 * rng.standard_normal(x0.size)) + 0.01 * rng.standard_normal(x0.size), u


def test_two_bus_closed_form():
    el = ElectricityNetwork(
        buses=(Bus(0), Bus(1)),
        lines=(Line("l", 0, 1, 8.0, 16.0, 1.0),),
        slack_bus=0,
        demands=(ElectricDemand("d", 1, 0.5, 0.2),),
    )
    st = solve_multi_energy_flow(MultiEnergyNetwork(el))
    assert st.vm_pu[1] == pytest.approx(TWO_BUS_VM, abs=1e-8)
    assert np.abs(ac_residuals(st, MultiEnergyNetwork(el))).max() < 1e-6


def test_toy_jacobian_matches_finite_differences(toy_units):
    fs = FlowSystem(healthy(toy_units))
    for x, u in random_states(fs, 10, seed=3):
        assert fd_jacobian_error(fs, x, u) < 1e-6


def test_toy_with_failures_converges(toy_units):
    dnet = degrade(toy_units, {"el.line.a", "gas.pipe.c"})
    st = solve_multi_energy_flow(dnet)
    assert st.residual_norm < 1e-6
    assert "a" not in st.line_ids


def test_conservation(toy_units):
    st = solve_multi_energy_flow(toy_units)
    rep = conservation_report(st, toy_units)
    for carrier, (inflow, outflow) in rep.items():
        assert inflow == pytest.approx(outflow, abs=1e-5), carrier
    assert np.abs(ac_residuals(st, toy_units)).max() < 1e-6


def test_resolve_from_solution_takes_no_more_than_one_iteration(toy_units):
    st = solve_multi_energy_flow(toy_units)
    again = solve_multi_energy_flow(toy_units, x0=st.x)
    assert again.iterations <= 1
    np.testing.assert_allclose(again.vm_pu, st.vm_pu, atol=1e-9)


def test_full_shedding_gives_flat_profile(toy):
    shed = {(c, d): 1.0 for c in Carrier for d in toy.demand_power_mw()[c]}
    st = solve_multi_energy_flow(toy, Controls(shed=shed))
    np.testing.assert_allclose(st.vm_pu, 1.0, atol=1e-9)
    np.testing.assert_allclose(st.gas_flow_kg_s, 0.0, atol=1e-9)
    np.testing.assert_allclose(st.pressure_pa, toy.gas.slack_pressure_pa, rtol=1e-9)
    assert st.slack_p_mw == pytest.approx(0.0, abs=1e-9)


def test_shedding_reduces_import(toy):
    base = solve_multi_energy_flow(toy)
    half = solve_multi_energy_flow(toy, Controls(shed={(Carrier.ELECTRICITY, "d1"): 0.5}))
    assert half.slack_p_mw < base.slack_p_mw
    assert base.slack_p_mw - half.slack_p_mw > 0.25  # shed 0.25 MW plus the saved losses


def test_divergence_raises():
    el = ElectricityNetwork(
        buses=(Bus(0), Bus(1)),
        lines=(Line("l", 0, 1, 80.0, 160.0, 1.0),),
        slack_bus=0,
        demands=(ElectricDemand("d", 1, 5.0, 2.0),),
    )
    with pytest.raises(DivergenceError):
        solve_multi_energy_flow(MultiEnergyNetwork(el), max_iter=30)


@pytest.mark.parametrize("density", [0.0, 0.5, 1.0, 1.5, 2.0])
def test_generated_networks_converge(density):
    net = case_mes(density)
    st = solve_multi_energy_flow(net)
    fs = FlowSystem(healthy(net))
    assert np.abs(fs.residual(st.x, fs.u_nominal())).max() < 1e-6


def test_generated_jacobian_matches_finite_differences():
    fs = FlowSystem(healthy(case_mes(1.0)))
    for x, u in random_states(fs, 5, seed=11):
        assert fd_jacobian_error(fs, x, u) < 1e-6
