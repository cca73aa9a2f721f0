"""Newton-Raphson solution of the stacked multi-energy flow equations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mesres.errors import DivergenceError, SingularJacobianError
from mesres.flow import physics
from mesres.flow.system import FlowSystem
from mesres.model.degrade import DegradedNetwork, healthy
from mesres.model.network import Carrier, CPKind, MultiEnergyNetwork, component_id

TOLERANCE = 1e-6
MAX_ITER = 100


def residual_report(fs: FlowSystem, r: np.ndarray) -> dict:
    """Largest absolute scaled residual per carrier block."""
    out = {}
    for name, sl in fs.layout.r.items():
        block = np.abs(r[sl])
        if block.size:
            out[name] = float(block.max())
    return out


def newton(fs: FlowSystem, u, x0=None, tol=TOLERANCE, max_iter=MAX_ITER):
    """Solve ``fs.residual(x, u) = 0`` for ``x``.

    Uses one halving step whenever a full step increases the residual
    infinity-norm.  Returns ``(x, iterations, norm)``.
    """
    x = fs.x_flat(u) if x0 is None else np.array(x0, dtype=float)
    if fs.nx == 0:
        return x, 0, 0.0
    r = fs.residual(x, u)
    norm = np.max(np.abs(r))
    it = 0
    while not norm < tol:
        if it >= max_iter or not np.isfinite(norm):
            raise DivergenceError(
                f"Newton did not converge in {it} iterations (|r|inf = {norm:.3e})",
                residual_report(fs, r),
            )
        jx, _ = fs.jacobian(x, u)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                dx = spla.splu(sp.csc_matrix(jx)).solve(-r)
        except (RuntimeError, Warning) as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(f"non-finite Newton step at iteration {it}")
        x_new = x + dx
        r_new = fs.residual(x_new, u)
        n_new = np.max(np.abs(r_new))
        if not n_new < norm:
            x_new = x + 0.5 * dx
            r_new = fs.residual(x_new, u)
            n_new = np.max(np.abs(r_new))
        x, r, norm = x_new, r_new, n_new
        it += 1
    return x, it, float(norm)


# --------------------------------------------------------------------------- results


@dataclass
class Controls:
    """Control overrides for a flow solve.

    ``shed`` maps ``(carrier, demand id)`` to a shedding coefficient and
    ``dispatch`` maps a component id (generator, gas source, heat producer or
    coupling point) to its set point.
    """

    shed: dict = field(default_factory=dict)
    dispatch: dict = field(default_factory=dict)


def controls_vector(fs: FlowSystem, controls: Controls | None) -> np.ndarray:
    u = fs.u_nominal()
    if controls is None:
        return u
    L = fs.layout.u
    if fs.el:
        for k, d in enumerate(fs.el.demands):
            u[L["s_el"].start + k] = controls.shed.get((Carrier.ELECTRICITY, d.id), 0.0)
        for k, g in enumerate(fs.el.gens):
            u[L["gen"].start + k] = controls.dispatch.get(component_id("generator", g.id), u[L["gen"].start + k])
    if fs.gas:
        for k, d in enumerate(fs.gas.demands):
            u[L["s_gas"].start + k] = controls.shed.get((Carrier.GAS, d.id), 0.0)
        for k, s in enumerate(fs.gas.sources):
            u[L["src"].start + k] = controls.dispatch.get(component_id("gas_source", s.id), u[L["src"].start + k])
    if fs.heat:
        for k, d in enumerate(fs.heat.demands):
            u[L["s_heat"].start + k] = controls.shed.get((Carrier.HEAT, d.id), 0.0)
        for k, p in enumerate(fs.heat.producers):
            cid = component_id("heat_producer", p.id)
            u[L["prod"].start + k] = controls.dispatch.get(cid, u[L["prod"].start + k])
    for k, cp in enumerate(fs.cps):
        u[L["cp"].start + k] = controls.dispatch.get(component_id("cp", cp.id), u[L["cp"].start + k])
    return u


@dataclass
class SteadyState:
    """Solved state of all carriers.  Arrays are aligned with the id tuples."""

    bus_ids: tuple
    vm_pu: np.ndarray
    va_rad: np.ndarray
    line_ids: tuple
    p_from_mw: np.ndarray
    q_from_mvar: np.ndarray
    p_to_mw: np.ndarray
    q_to_mvar: np.ndarray
    loading_percent: np.ndarray
    slack_p_mw: float
    slack_q_mvar: float
    gen_ids: tuple
    gen_p_mw: np.ndarray
    gas_junction_ids: tuple
    pressure_pa: np.ndarray
    gas_pipe_ids: tuple
    gas_flow_kg_s: np.ndarray
    gas_slack_import_kg_s: float
    gas_source_ids: tuple
    gas_source_kg_s: np.ndarray
    heat_junction_ids: tuple
    temperature_k: np.ndarray
    heat_pressure_pa: np.ndarray
    heat_pipe_ids: tuple
    heat_flow_kg_s: np.ndarray  # in document from -> to direction
    heat_loss_w: np.ndarray
    heat_t_from_k: np.ndarray
    heat_t_to_k: np.ndarray
    heat_root_supply_mw: float
    heat_producer_ids: tuple
    heat_producer_mw: np.ndarray
    cp_ids: tuple
    cp_input: np.ndarray
    cp_p_el_mw: np.ndarray  # net electric injection (negative = consumption)
    cp_heat_mw: np.ndarray
    cp_gas_kg_s: np.ndarray  # net gas injection (negative = consumption)
    shed: dict
    iterations: int = 0
    residual_norm: float = 0.0
    x: np.ndarray | None = field(default=None, repr=False)

    @property
    def voltage(self) -> np.ndarray:
        return self.vm_pu * np.exp(1j * self.va_rad)

    def bus_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bus": self.bus_ids, "vm_pu": self.vm_pu, "va_deg": np.rad2deg(self.va_rad)})

    def line_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "line": self.line_ids,
                "p_from_mw": self.p_from_mw,
                "q_from_mvar": self.q_from_mvar,
                "p_to_mw": self.p_to_mw,
                "q_to_mvar": self.q_to_mvar,
                "loading_percent": self.loading_percent,
            }
        )

    def gas_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"junction": self.gas_junction_ids, "pressure_pa": self.pressure_pa})

    def heat_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "junction": self.heat_junction_ids,
                "temperature_k": self.temperature_k,
                "pressure_pa": self.heat_pressure_pa,
            }
        )

    def summary(self) -> dict:
        return {
            "slack_p_mw": self.slack_p_mw,
            "slack_q_mvar": self.slack_q_mvar,
            "gas_slack_import_kg_s": self.gas_slack_import_kg_s,
            "heat_root_supply_mw": self.heat_root_supply_mw,
            "min_vm_pu": float(self.vm_pu.min()) if self.vm_pu.size else None,
            "max_loading_percent": float(self.loading_percent.max()) if self.loading_percent.size else None,
            "min_pressure_pa": float(self.pressure_pa.min()) if self.pressure_pa.size else None,
            "min_temperature_k": float(self.temperature_k.min()) if self.temperature_k.size else None,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
        }


def build_state(fs: FlowSystem, x, u, iterations=0, norm=0.0) -> SteadyState:
    dnet = fs.dnet
    net = dnet.base
    L = fs.layout.u
    empty = np.zeros(0)
    shed = {(c, d): 1.0 for c, d in dnet.dropped_demands}

    if fs.el:
        e = fs.el
        sf, st, V, vm = fs.branch_flows(x)
        va = np.angle(V)
        ifrom = np.abs(sf) / vm[e.f_idx]
        ito = np.abs(st) / vm[e.t_idx]
        loading = 100 * np.maximum(ifrom, ito) / e.imax_pu if e.lines else empty
        ps, qs = fs.el_slack_power(x, u)
        el = dict(
            bus_ids=e.bus_ids,
            vm_pu=vm,
            va_rad=va,
            line_ids=tuple(ln.id for ln in e.lines),
            p_from_mw=sf.real * e.base_mva,
            q_from_mvar=sf.imag * e.base_mva,
            p_to_mw=st.real * e.base_mva,
            q_to_mvar=st.imag * e.base_mva,
            loading_percent=loading,
            slack_p_mw=float(ps),
            slack_q_mvar=float(qs),
            gen_ids=tuple(g.id for g in e.gens),
            gen_p_mw=u[L["gen"]].copy(),
        )
        for k, d in enumerate(e.demands):
            shed[(Carrier.ELECTRICITY, d.id)] = float(u[L["s_el"].start + k])
    else:
        el = dict(
            bus_ids=(), vm_pu=empty, va_rad=empty, line_ids=(), p_from_mw=empty, q_from_mvar=empty,
            p_to_mw=empty, q_to_mvar=empty, loading_percent=empty, slack_p_mw=0.0, slack_q_mvar=0.0,
            gen_ids=(), gen_p_mw=empty,
        )

    if fs.gas:
        g = fs.gas
        p, f = g.split(x[fs.layout.x["gas"]])
        gas = dict(
            gas_junction_ids=g.ids,
            pressure_pa=p,
            gas_pipe_ids=tuple(pp.id for pp in g.pipes),
            gas_flow_kg_s=f.copy(),
            gas_slack_import_kg_s=float(fs.gas_slack_import(x, u)),
            gas_source_ids=tuple(s.id for s in g.sources),
            gas_source_kg_s=u[L["src"]].copy(),
        )
        for k, d in enumerate(g.demands):
            shed[(Carrier.GAS, d.id)] = float(u[L["s_gas"].start + k])
    else:
        gas = dict(
            gas_junction_ids=(), pressure_pa=empty, gas_pipe_ids=(), gas_flow_kg_s=empty,
            gas_slack_import_kg_s=0.0, gas_source_ids=(), gas_source_kg_s=empty,
        )

    if fs.heat:
        h = fs.heat
        T, m, ph = h.split(x[fs.layout.x["heat"]])
        ta, tb = T[h.a], T[h.b]
        loss = physics.heat_loss(ta, tb, m, insulation_k=h.kins, length=h.L, t_ext=h.t_ext)
        forward = h.sign > 0
        heat = dict(
            heat_junction_ids=h.ids,
            temperature_k=T,
            heat_pressure_pa=ph,
            heat_pipe_ids=tuple(pp.id for pp in h.pipes),
            heat_flow_kg_s=h.sign * m,
            heat_loss_w=loss,
            heat_t_from_k=np.where(forward, ta, tb),
            heat_t_to_k=np.where(forward, tb, ta),
            heat_root_supply_mw=float(fs.heat_root_supply(x, u)),
            heat_producer_ids=tuple(pp.id for pp in h.producers),
            heat_producer_mw=u[L["prod"]].copy(),
        )
        for k, d in enumerate(h.demands):
            shed[(Carrier.HEAT, d.id)] = float(u[L["s_heat"].start + k])
    else:
        heat = dict(
            heat_junction_ids=(), temperature_k=empty, heat_pressure_pa=empty, heat_pipe_ids=(),
            heat_flow_kg_s=empty, heat_loss_w=empty, heat_t_from_k=empty, heat_t_to_k=empty,
            heat_root_supply_mw=0.0, heat_producer_ids=(), heat_producer_mw=empty,
        )

    uin = u[L["cp"]]
    p_el = np.zeros(len(fs.cps))
    h_cp = np.zeros(len(fs.cps))
    f_cp = np.zeros(len(fs.cps))
    uh = net.unit_factor * net.gas.constants.hhv_kwh_per_kg
    for k, cp in enumerate(fs.cps):
        if cp.kind is CPKind.CHP:
            pe, he = physics.chp_conversion(uin[k], cp.eta_el, cp.eta_heat, net.gas.constants.hhv_kwh_per_kg,
                                            net.unit_factor, net.unit_factor)
            p_el[k], h_cp[k], f_cp[k] = pe, -he, -uin[k]
        elif cp.kind is CPKind.P2H:
            p_el[k], h_cp[k] = -uin[k], physics.p2h_conversion(uin[k], cp.eta_el)
        else:
            p_el[k] = -uin[k]
            f_cp[k] = cp.eta_gas * uin[k] / uh
    for c, items in (
        (Carrier.ELECTRICITY, net.electricity.demands),
        (Carrier.GAS, net.gas.demands),
        (Carrier.HEAT, net.heat.demands),
    ):
        for d in items:
            shed.setdefault((c, d.id), 0.0)
    return SteadyState(
        **el, **gas, **heat,
        cp_ids=tuple(cp.id for cp in fs.cps),
        cp_input=uin.copy(),
        cp_p_el_mw=p_el,
        cp_heat_mw=h_cp,
        cp_gas_kg_s=f_cp,
        shed=shed,
        iterations=iterations,
        residual_norm=norm,
    )


def solve_multi_energy_flow(
    net: MultiEnergyNetwork | DegradedNetwork,
    controls: Controls | None = None,
    x0=None,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITER,
) -> SteadyState:
    """Solve the coupled steady state of ``net`` at the given controls.

    Without ``controls`` all units run at their nominal set points and no
    demand is shed.  Parts of a degraded network cut off from their slack are
    left out and their demands reported as fully shed.
    """
    dnet = healthy(net) if isinstance(net, MultiEnergyNetwork) else net
    fs = FlowSystem(dnet)
    u = controls_vector(fs, controls)
    x, it, norm = newton(fs, u, x0=x0, tol=tol, max_iter=max_iter)
    state = build_state(fs, x, u, it, norm)
    state.x = x
    return state


def ac_residuals(state: SteadyState, net: MultiEnergyNetwork) -> np.ndarray:
    """Complex nodal balance per bus from explicit branch flows (pu).

    Each line contributes ``S_ij`` at its from bus and ``S_ji`` at its to bus;
    the slack injection and coupling-point terms are taken from ``state``.
    Evaluates to zero at a valid power flow.
    """
    el = net.electricity
    base = el.base_mva
    idx = {b: i for i, b in enumerate(state.bus_ids)}
    V = state.voltage
    vm2 = np.abs(V) ** 2
    bal = np.zeros(len(V), dtype=complex)
    for g, p in zip(state.gen_ids, state.gen_p_mw):
        gen = next(x for x in el.generators if x.id == g)
        bal[idx[gen.bus]] += p / base
    bal[idx[el.slack_bus]] += (state.slack_p_mw + 1j * state.slack_q_mvar) / base
    for d in el.demands:
        if d.bus in idx:
            s = state.shed.get((Carrier.ELECTRICITY, d.id), 0.0)
            bal[idx[d.bus]] -= (1 - s) * (d.p_mw + 1j * d.q_mvar) / base
    for sh in el.shunts:
        if sh.bus in idx:
            bal[idx[sh.bus]] -= (sh.g_mw + 1j * sh.b_mvar) / base * vm2[idx[sh.bus]]
    cps = {cp.id: cp for cp in net.coupling_points}
    for cid, pe in zip(state.cp_ids, state.cp_p_el_mw):
        bal[idx[cps[cid].el_bus]] += pe / base
    lines = {ln.id: ln for ln in el.lines}
    for lid in state.line_ids:
        ln = lines[lid]
        i, j = idx[ln.from_bus], idx[ln.to_bus]
        zbase = el.bus(ln.from_bus).vn_kv ** 2 / base
        y = 1.0 / complex(ln.r_ohm / zbase, ln.x_ohm / zbase)
        yc = 0.5j * ln.b_us * 1e-6 * zbase
        T = ln.tap * np.exp(1j * np.deg2rad(ln.shift_deg))
        s_ij = np.conj(y + yc) * vm2[i] / abs(T) ** 2 - np.conj(y) * V[i] * np.conj(V[j]) / T
        s_ji = np.conj(y + yc) * vm2[j] - np.conj(y) * np.conj(V[i]) * V[j] / np.conj(T)
        bal[i] -= s_ij
        bal[j] -= s_ji
    return bal


def conservation_report(state: SteadyState, net: MultiEnergyNetwork) -> dict:
    """Supply, consumption and losses per carrier (MW, kg/s for gas)."""
    el = net.electricity
    dem_el = sum(
        (1 - state.shed.get((Carrier.ELECTRICITY, d.id), 0.0)) * d.p_mw
        for d in el.demands
        if d.bus in set(state.bus_ids)
    )
    shunt = sum(sh.g_mw * state.vm_pu[list(state.bus_ids).index(sh.bus)] ** 2 for sh in el.shunts
                if sh.bus in set(state.bus_ids))
    line_loss = float(np.sum(state.p_from_mw + state.p_to_mw))
    el_in = state.slack_p_mw + float(np.sum(state.gen_p_mw)) + float(np.sum(np.maximum(state.cp_p_el_mw, 0)))
    el_out = dem_el + shunt + line_loss + float(np.sum(np.maximum(-state.cp_p_el_mw, 0)))
    js = set(state.gas_junction_ids)
    gas_dem = sum(
        (1 - state.shed.get((Carrier.GAS, d.id), 0.0)) * d.mass_flow_kg_s for d in net.gas.demands if d.junction in js
    )
    gas_in = state.gas_slack_import_kg_s + float(np.sum(state.gas_source_kg_s)) + float(
        np.sum(np.maximum(state.cp_gas_kg_s, 0))
    )
    gas_out = gas_dem + float(np.sum(np.maximum(-state.cp_gas_kg_s, 0)))
    hs = set(state.heat_junction_ids)
    heat_dem = sum(
        (1 - state.shed.get((Carrier.HEAT, d.id), 0.0)) * d.h_mw for d in net.heat.demands if d.junction in hs
    )
    heat_in = state.heat_root_supply_mw + float(np.sum(state.heat_producer_mw)) + float(np.sum(state.cp_heat_mw))
    heat_loss = -float(np.sum(state.heat_loss_w)) / 1e6
    return {
        "el": (el_in, el_out),
        "gas": (gas_in, gas_out),
        "heat": (heat_in, heat_dem + heat_loss),
    }
