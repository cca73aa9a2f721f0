"""Stacked steady-state equation system of a (possibly degraded) network.

The unknowns ``x`` are, in order,

* electricity: voltage angles then magnitudes of all non-slack buses (rad, pu),
* gas: pressures of non-slack junctions (Pa) then pipe mass flows (kg/s),
* heat: temperatures of non-root junctions (K), pipe mass flows along the
  tree orientation (kg/s), and pressures of non-root junctions (Pa).

The controls ``u`` are shedding coefficients (electricity, gas, heat demands),
generator dispatch (MW), gas source flows (kg/s), heat producer output (MW)
and coupling-point inputs (kg/s gas for a CHP, MW electric otherwise).

Residuals are returned row-scaled so that one unit of each row has a
comparable engineering meaning (see ``ROW_SCALE``); variables stay physical
and ``x_scale``/``u_scale`` describe natural magnitudes for optimisers.

The district-heating part is a supply network only: each non-root junction is
fed by exactly one pipe, demands draw water at the junction temperature and
return it at ``t_return_k`` outside the model, and producers or coupling points
inject heat at a junction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from mesres.errors import StructuralError
from mesres.flow import physics
from mesres.model.degrade import DegradedNetwork
from mesres.model.network import Carrier, CPKind, component_id

MW = 1.0e6
#: mass flow added in the heat energy rows so temperatures stay defined at zero flow
EPS_FLOW = 1.0e-6

ROW_SCALE = {
    "el": 1.0,  # pu on base_mva
    "weymouth": 1.0e10,  # bar^2
    "gas_mass": 1.0e-2,  # 10 g/s
    "heat_mass": 1.0,  # kg/s
    "heat_energy": 1.0e3,  # kW
    "heat_pressure": 1.0e5,  # bar
}
GAS_P_SCALE = 1.0e5
GAS_F_SCALE = 1.0e-2
T_SCALE = 10.0


def _coo(rows, cols, vals, shape):
    return sp.csr_matrix(
        (np.asarray(vals, dtype=float), (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int))),
        shape=shape,
    )


# --------------------------------------------------------------------------- electricity


class ElectricBlock:
    def __init__(self, dnet: DegradedNetwork):
        net = dnet.base
        el = net.electricity
        self.base_mva = el.base_mva
        self.bus_ids = tuple(sorted(dnet.buses))
        idx = {b: i for i, b in enumerate(self.bus_ids)}
        self.idx = idx
        n = len(self.bus_ids)
        self.n = n
        self.slack = idx[el.slack_bus]
        self.slack_vm = el.slack_vm_pu
        self.pq = np.array([i for i in range(n) if i != self.slack], dtype=int)

        lines = [x for x in el.lines if dnet.is_active(component_id("line", x.id))]
        self.lines = tuple(lines)
        nl = len(lines)
        f = np.array([idx[x.from_bus] for x in lines], dtype=int)
        t = np.array([idx[x.to_bus] for x in lines], dtype=int)
        kv = np.array([el.bus(x.from_bus).vn_kv for x in lines], dtype=float)
        zbase = kv**2 / self.base_mva
        r = np.array([x.r_ohm for x in lines], dtype=float) / zbase
        xx = np.array([x.x_ohm for x in lines], dtype=float) / zbase
        bc = np.array([x.b_us for x in lines], dtype=float) * 1e-6 * zbase
        tap = np.array([x.tap for x in lines], dtype=float) * np.exp(
            1j * np.deg2rad([x.shift_deg for x in lines])
        )
        ys = 1.0 / (r + 1j * xx) if nl else np.zeros(0, complex)
        ytt = ys + 0.5j * bc
        yff = ytt / (tap * np.conj(tap))
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        rows = np.arange(nl)
        self.Yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
        self.Yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(nl, n))
        Cf = sp.csr_matrix((np.ones(nl), (rows, f)), shape=(nl, n))
        Ct = sp.csr_matrix((np.ones(nl), (rows, t)), shape=(nl, n))
        self.Cf, self.Ct = Cf, Ct
        self.Ybus = (Cf.T @ self.Yf + Ct.T @ self.Yt).tocsr()
        self.f_idx, self.t_idx = f, t
        self.ibase_ka = self.base_mva / (np.sqrt(3.0) * kv) if nl else np.zeros(0)
        self.imax_pu = np.array([x.max_i_ka for x in lines], dtype=float) / self.ibase_ka if nl else np.zeros(0)

        ysh = np.zeros(n, dtype=complex)
        for s in el.shunts:
            if s.bus in idx:
                ysh[idx[s.bus]] += (s.g_mw + 1j * s.b_mvar) / self.base_mva
        self.shunt = ysh

        self.demands = tuple(d for d in el.demands if d.bus in idx)
        self.dem_bus = np.array([idx[d.bus] for d in self.demands], dtype=int)
        self.dem_s = np.array([d.p_mw + 1j * d.q_mvar for d in self.demands], dtype=complex) / self.base_mva
        self.gens = tuple(g for g in el.generators if dnet.is_active(component_id("generator", g.id)))
        self.gen_bus = np.array([idx[g.bus] for g in self.gens], dtype=int)

    @property
    def nx(self) -> int:
        return 2 * (self.n - 1)

    def voltage(self, x):
        va = np.zeros(self.n)
        vm = np.full(self.n, self.slack_vm)
        k = self.n - 1
        va[self.pq] = x[:k]
        vm[self.pq] = x[k:]
        return vm * np.exp(1j * va), vm, va

    def x_flat(self):
        return np.r_[np.zeros(self.n - 1), np.ones(self.n - 1)]


# --------------------------------------------------------------------------- gas


class GasBlock:
    def __init__(self, dnet: DegradedNetwork):
        gas = dnet.base.gas
        self.ids = tuple(sorted(dnet.gas_junctions))
        idx = {j: i for i, j in enumerate(self.ids)}
        self.idx = idx
        self.n = len(self.ids)
        self.slack = idx.get(gas.slack_junction, -1)
        self.slack_p = gas.slack_pressure_pa
        self.ns = np.array([i for i in range(self.n) if i != self.slack], dtype=int)
        c = gas.constants
        self.hhv = c.hhv_kwh_per_kg
        pipes = [p for p in gas.pipes if dnet.is_active(component_id("gas_pipe", p.id))]
        self.pipes = tuple(pipes)
        self.a = np.array([idx[p.from_junction] for p in pipes], dtype=int)
        self.b = np.array([idx[p.to_junction] for p in pipes], dtype=int)
        L = np.array([p.length_m for p in pipes], dtype=float)
        D = np.array([p.diameter_m for p in pipes], dtype=float)
        self.params = dict(
            length=L,
            diameter=D,
            d_in=np.array([p.d_in for p in pipes], dtype=float),
            roughness=np.array([p.roughness_m for p in pipes], dtype=float),
            viscosity=c.viscosity,
            gamma_sq=c.gamma_sq,
        )
        self.K = physics.weymouth_coefficient(L, D, c.gamma_sq)
        self.demands = tuple(d for d in gas.demands if d.junction in idx)
        self.dem_j = np.array([idx[d.junction] for d in self.demands], dtype=int)
        self.dem_m = np.array([d.mass_flow_kg_s for d in self.demands], dtype=float)
        self.sources = tuple(s for s in gas.sources if dnet.is_active(component_id("gas_source", s.id)))
        self.src_j = np.array([idx[s.junction] for s in self.sources], dtype=int)

    @property
    def nx(self) -> int:
        return (self.n - 1) + len(self.pipes) if self.n else 0

    def split(self, x):
        k = self.n - 1
        p = np.full(self.n, self.slack_p)
        p[self.ns] = x[:k]
        return p, x[k:]

    def x_flat(self):
        return np.r_[np.full(self.n - 1, self.slack_p), np.zeros(len(self.pipes))]

    def friction(self, f):
        P = self.params
        return physics.friction_flow_term(f, P["diameter"], P["d_in"], P["roughness"], P["viscosity"])


# --------------------------------------------------------------------------- heat


class HeatBlock:
    def __init__(self, dnet: DegradedNetwork):
        heat = dnet.base.heat
        self.ids = tuple(sorted(dnet.heat_junctions))
        idx = {j: i for i, j in enumerate(self.ids)}
        self.idx = idx
        self.n = len(self.ids)
        c = heat.constants
        self.C = c.heat_capacity
        self.t_ret = c.t_return_k
        self.t_sup = heat.supply_temperature_k
        self.root_p = heat.slack_pressure_pa
        self.root = idx.get(heat.slack_junction, -1)
        pipes = [p for p in heat.pipes if dnet.is_active(component_id("water_pipe", p.id))]

        # orient the tree away from the root; pipe i feeds junction ns[i]
        adj: dict[int, list] = {i: [] for i in range(self.n)}
        for p in pipes:
            a, b = idx[p.from_junction], idx[p.to_junction]
            adj[a].append((b, p))
            adj[b].append((a, p))
        order, parent_pipe, parent = [], {}, {}
        if self.n:
            seen = {self.root}
            queue = deque([self.root])
            while queue:
                a = queue.popleft()
                for b, p in adj[a]:
                    if b in seen:
                        continue
                    seen.add(b)
                    order.append(b)
                    parent_pipe[b] = p
                    parent[b] = a
                    queue.append(b)
            if len(seen) != self.n:
                raise StructuralError("heat network part is not connected to its root")
        self.ns = np.array(order, dtype=int)
        self.pos = {j: i for i, j in enumerate(order)}  # junction index -> position in ns
        self.pipes = tuple(parent_pipe[b] for b in order)
        self.a = np.array([parent[b] for b in order], dtype=int)
        self.b = self.ns.copy()
        self.sign = np.array(
            [1.0 if idx[p.from_junction] == parent[b] else -1.0 for b, p in zip(order, self.pipes)]
        )
        P = self.pipes
        L = np.array([p.length_m for p in P], dtype=float)
        D = np.array([p.diameter_m for p in P], dtype=float)
        self.L, self.D = L, D
        self.d_in = np.array([p.d_in for p in P], dtype=float)
        self.rough = np.array([p.roughness_m for p in P], dtype=float)
        self.kins = np.array([p.insulation_k for p in P], dtype=float)
        self.t_ext = np.array([c.t_ext_k if p.t_ext_k is None else p.t_ext_k for p in P], dtype=float)
        self.visc = c.viscosity
        self.rho = c.density
        self.Kdw = physics.darcy_coefficient(L, D, c.density)

        self.demands = tuple(d for d in heat.demands if d.junction in idx)
        self.dem_j = np.array([idx[d.junction] for d in self.demands], dtype=int)
        self.dem_h = np.array([d.h_mw for d in self.demands], dtype=float)
        self.producers = tuple(
            p for p in heat.producers if dnet.is_active(component_id("heat_producer", p.id))
        )
        self.prod_j = np.array([idx[p.junction] for p in self.producers], dtype=int)

    @property
    def m(self) -> int:
        return len(self.pipes)

    @property
    def nx(self) -> int:
        return 3 * self.m

    def split(self, x):
        m = self.m
        T = np.full(self.n, self.t_sup)
        p = np.full(self.n, self.root_p)
        T[self.ns] = x[:m]
        p[self.ns] = x[2 * m :]
        return T, x[m : 2 * m], p

    def friction(self, flow):
        return physics.friction_flow_term(flow, self.D, self.d_in, self.rough, self.visc)


# --------------------------------------------------------------------------- full system


@dataclass
class Layout:
    x: dict  # block name -> slice into x
    r: dict  # block name -> slice into residual
    u: dict  # control group -> slice into u


class FlowSystem:
    """Residuals, Jacobians and operational constraints of a degraded network.

    ``carriers`` restricts the system to a subset of carriers; only coupling
    points whose carriers are all included are kept.
    """

    def __init__(self, dnet: DegradedNetwork, carriers=None):
        self.dnet = dnet
        net = dnet.base
        carriers = tuple(Carrier) if carriers is None else tuple(sorted(Carrier(c) for c in carriers))
        self.carriers = carriers
        self.unit = net.unit_factor
        self.hhv = net.gas.constants.hhv_kwh_per_kg

        self.el = ElectricBlock(dnet) if Carrier.ELECTRICITY in carriers else None
        self.gas = GasBlock(dnet) if Carrier.GAS in carriers and dnet.gas_junctions else None
        self.heat = HeatBlock(dnet) if Carrier.HEAT in carriers and dnet.heat_junctions else None

        cps = []
        for cp in net.coupling_points:
            if not dnet.is_active(component_id("cp", cp.id)):
                continue
            if all(c in carriers for c in cp.carriers()):
                cps.append(cp)
        self.cps = tuple(cps)
        self._cp_matrices()

        el, gas, heat = self.el, self.gas, self.heat
        sizes_x = [("el", el.nx if el else 0), ("gas", gas.nx if gas else 0), ("heat", heat.nx if heat else 0)]
        self.layout = Layout({}, {}, {})
        off = 0
        for name, k in sizes_x:
            self.layout.x[name] = slice(off, off + k)
            self.layout.r[name] = slice(off, off + k)
            off += k
        self.nx = off
        groups = [
            ("s_el", len(el.demands) if el else 0),
            ("s_gas", len(gas.demands) if gas else 0),
            ("s_heat", len(heat.demands) if heat else 0),
            ("gen", len(el.gens) if el else 0),
            ("src", len(gas.sources) if gas else 0),
            ("prod", len(heat.producers) if heat else 0),
            ("cp", len(self.cps)),
        ]
        off = 0
        for name, k in groups:
            self.layout.u[name] = slice(off, off + k)
            off += k
        self.nu = off

    # ---------------------------------------------------------------- controls

    def _cp_matrices(self):
        """Per-carrier injection per unit of CP input (MW or kg/s per input unit)."""
        uh = self.unit * self.hhv
        el_rows, gas_rows, heat_rows = [], [], []
        for k, cp in enumerate(self.cps):
            if cp.kind is CPKind.CHP:
                el_rows.append((self.el.idx[cp.el_bus], k, cp.eta_el * uh))
                gas_rows.append((self.gas.idx[cp.gas_junction], k, -1.0))
                heat_rows.append((self.heat.idx[cp.heat_junction], k, cp.eta_heat * uh))
            elif cp.kind is CPKind.P2H:
                el_rows.append((self.el.idx[cp.el_bus], k, -1.0))
                heat_rows.append((self.heat.idx[cp.heat_junction], k, cp.eta_el))
            else:
                el_rows.append((self.el.idx[cp.el_bus], k, -1.0))
                gas_rows.append((self.gas.idx[cp.gas_junction], k, cp.eta_gas / uh))
        ncp = len(self.cps)

        def mat(rows, n):
            if not rows:
                return sp.csr_matrix((n, ncp))
            r, c, v = zip(*rows)
            return _coo(r, c, v, (n, ncp))

        self.cp_el = mat(el_rows, self.el.n if self.el else 0)
        self.cp_gas = mat(gas_rows, self.gas.n if self.gas else 0)
        self.cp_heat = mat(heat_rows, self.heat.n if self.heat else 0)

    def u_nominal(self) -> np.ndarray:
        u = np.zeros(self.nu)
        L = self.layout.u
        if self.el:
            u[L["gen"]] = [g.p_mw for g in self.el.gens]
        if self.gas:
            u[L["src"]] = [s.mass_flow_kg_s for s in self.gas.sources]
        if self.heat:
            u[L["prod"]] = [p.h_mw for p in self.heat.producers]
        u[L["cp"]] = [cp.dispatch for cp in self.cps]
        return u

    def u_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.zeros(self.nu)
        hi = np.ones(self.nu)
        L = self.layout.u
        if self.el:
            hi[L["gen"]] = [g.rating_mw for g in self.el.gens]
        if self.gas:
            hi[L["src"]] = [s.rating for s in self.gas.sources]
        if self.heat:
            hi[L["prod"]] = [p.rating_mw for p in self.heat.producers]
        hi[L["cp"]] = [cp.rating for cp in self.cps]
        return lo, hi

    def u_scale(self) -> np.ndarray:
        s = np.ones(self.nu)
        L = self.layout.u
        s[L["gen"]] = 0.1
        s[L["src"]] = GAS_F_SCALE
        s[L["prod"]] = 0.1
        s[L["cp"]] = [GAS_F_SCALE if cp.kind is CPKind.CHP else 0.1 for cp in self.cps]
        return s

    def x_scale(self) -> np.ndarray:
        s = np.ones(self.nx)
        if self.gas:
            g = self.gas
            sl = self.layout.x["gas"]
            s[sl] = np.r_[np.full(g.n - 1, GAS_P_SCALE), np.full(len(g.pipes), GAS_F_SCALE)]
        if self.heat:
            h = self.heat
            sl = self.layout.x["heat"]
            s[sl] = np.r_[np.full(h.m, T_SCALE), np.ones(h.m), np.full(h.m, GAS_P_SCALE)]
        return s

    def demand_power(self) -> np.ndarray:
        """Power (MW) of each shedding control, zero for non-shedding controls."""
        w = np.zeros(self.nu)
        L = self.layout.u
        if self.el:
            w[L["s_el"]] = [d.p_mw for d in self.el.demands]
        if self.gas:
            w[L["s_gas"]] = self.gas.dem_m * self.unit * self.hhv
        if self.heat:
            w[L["s_heat"]] = self.heat.dem_h
        return w

    # ---------------------------------------------------------------- start values

    def x_flat(self, u=None) -> np.ndarray:
        """Flat start; the heat part is propagated feed-forward from the root."""
        x = np.zeros(self.nx)
        if self.el:
            x[self.layout.x["el"]] = self.el.x_flat()
        if self.gas:
            x[self.layout.x["gas"]] = self.gas.x_flat()
        if self.heat:
            x[self.layout.x["heat"]] = self._heat_feed_forward(self.u_nominal() if u is None else u)
        return x

    def _heat_feed_forward(self, u):
        h = self.heat
        m = h.m
        L = self.layout.u
        shed = u[L["s_heat"]]
        T = np.full(h.n, h.t_sup)
        md = (1 - shed) * h.dem_h * MW / (h.C * (h.t_sup - h.t_ret))
        load = np.zeros(h.n)
        np.add.at(load, h.dem_j, md)
        flow = np.zeros(m)
        # accumulate subtree demand from the leaves up
        for i in range(m - 1, -1, -1):
            b = h.ns[i]
            flow[i] += load[b]
            a = h.a[i]
            if a != h.root:
                flow[h.pos[a]] += flow[i]
        inj = self._heat_injection(u)
        for i in range(m):
            a, b = h.a[i], h.b[i]
            mm = flow[i] + EPS_FLOW
            k = 2 * np.pi * h.kins[i] * h.L[i]
            # m C (Tb - Ta) + k m ((Ta+Tb)/2 - Text) = inj
            T[b] = (inj[b] * MW + mm * (h.C * T[a] - k * (T[a] / 2 - h.t_ext[i]))) / (mm * (h.C + k / 2))
        p = np.full(h.n, h.root_p)
        term, _ = h.friction(flow)
        for i in range(m):
            p[h.b[i]] = p[h.a[i]] - h.Kdw[i] * term[i]
        return np.r_[T[h.ns], flow, p[h.ns]]

    def _heat_injection(self, u):
        h = self.heat
        inj = np.zeros(h.n)
        np.add.at(inj, h.prod_j, u[self.layout.u["prod"]])
        inj += self.cp_heat @ u[self.layout.u["cp"]]
        return inj

    # ---------------------------------------------------------------- residuals

    def residual(self, x, u) -> np.ndarray:
        r = np.zeros(self.nx)
        L = self.layout
        if self.el:
            r[L.r["el"]] = self._el_residual(x[L.x["el"]], u)
        if self.gas:
            r[L.r["gas"]] = self._gas_residual(x[L.x["gas"]], u)
        if self.heat:
            r[L.r["heat"]] = self._heat_residual(x[L.x["heat"]], u)
        return r

    def _el_sched(self, vm, u):
        e = self.el
        L = self.layout.u
        s = np.zeros(e.n, dtype=complex)
        np.add.at(s, e.gen_bus, u[L["gen"]] / e.base_mva)
        np.add.at(s, e.dem_bus, -(1 - u[L["s_el"]]) * e.dem_s)
        s += (self.cp_el @ u[L["cp"]]) / e.base_mva
        s -= e.shunt * vm**2
        return s

    def _el_residual(self, xe, u):
        e = self.el
        V, vm, _ = e.voltage(xe)
        mis = self._el_sched(vm, u) - V * np.conj(e.Ybus @ V)
        return np.r_[mis.real[e.pq], mis.imag[e.pq]] / ROW_SCALE["el"]

    def _gas_injection(self, u):
        g = self.gas
        L = self.layout.u
        inj = np.zeros(g.n)
        np.add.at(inj, g.src_j, u[L["src"]])
        np.add.at(inj, g.dem_j, -(1 - u[L["s_gas"]]) * g.dem_m)
        inj += self.cp_gas @ u[L["cp"]]
        return inj

    def _gas_residual(self, xg, u):
        g = self.gas
        p, f = g.split(xg)
        term, _ = g.friction(f)
        wey = (p[g.a] ** 2 - p[g.b] ** 2 - g.K * term) / ROW_SCALE["weymouth"]
        bal = physics.mass_balance_residuals(g.n, g.a, g.b, f, self._gas_injection(u))
        return np.r_[wey, bal[g.ns] / ROW_SCALE["gas_mass"]]

    def _heat_demand_flow(self, T, u):
        h = self.heat
        shed = u[self.layout.u["s_heat"]]
        dT = T[h.dem_j] - h.t_ret
        md = (1 - shed) * h.dem_h * MW / (h.C * dT)
        return md, dT

    def _heat_residual(self, xh, u):
        h = self.heat
        T, m, p = h.split(xh)
        md, _ = self._heat_demand_flow(T, u)
        out = np.zeros(h.n)
        np.add.at(out, h.a, m)
        np.add.at(out, h.dem_j, md)
        inflow = np.zeros(h.n)
        inflow[h.b] = m
        mass = (inflow - out)[h.ns] / ROW_SCALE["heat_mass"]
        Ta, Tb = T[h.a], T[h.b]
        k = 2 * np.pi * h.kins * h.L
        bracket = h.C * (Tb - Ta) + k * ((Ta + Tb) / 2 - h.t_ext)
        inj = self._heat_injection(u)
        energy = ((m + EPS_FLOW) * bracket - MW * inj[h.b]) / ROW_SCALE["heat_energy"]
        term, _ = h.friction(m)
        dw = (p[h.a] - p[h.b] - h.Kdw * term) / ROW_SCALE["heat_pressure"]
        return np.r_[mass, energy, dw]

    # ---------------------------------------------------------------- Jacobians

    def jacobian(self, x, u):
        """Sparse ``(dr/dx, dr/du)`` of the row-scaled residual."""
        blocks_x, blocks_u = [], []
        L = self.layout
        if self.el:
            jx, ju = self._el_jac(x[L.x["el"]], u)
            blocks_x.append(jx)
            blocks_u.append(ju)
        if self.gas:
            jx, ju = self._gas_jac(x[L.x["gas"]], u)
            blocks_x.append(jx)
            blocks_u.append(ju)
        if self.heat:
            jx, ju = self._heat_jac(x[L.x["heat"]], u)
            blocks_x.append(jx)
            blocks_u.append(ju)
        if not blocks_x:
            return sp.csr_matrix((0, 0)), sp.csr_matrix((0, self.nu))
        return sp.block_diag(blocks_x, format="csc"), sp.vstack(blocks_u, format="csr")

    def _el_dscalc(self, V, vm):
        """Dense ``dS/dVa`` and ``dS/dVm`` of the calculated bus injections."""
        e = self.el
        Y = e.__dict__.get("_ybus_dense")
        if Y is None:
            Y = e._ybus_dense = e.Ybus.toarray()
        I = Y @ V
        Vn = V / vm
        dS_dVm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
        dS_dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
        return dS_dVa, dS_dVm

    def _el_jac(self, xe, u):
        e = self.el
        V, vm, _ = e.voltage(xe)
        dVa, dVm = self._el_dscalc(V, vm)
        dVm = dVm + np.diag(2 * e.shunt * vm)  # shunt consumption is part of -d(mis)
        pq = e.pq
        A = dVa[np.ix_(pq, pq)]
        M = dVm[np.ix_(pq, pq)]
        jx = sp.csr_matrix(-np.block([[A.real, M.real], [A.imag, M.imag]]) / ROW_SCALE["el"])
        ju = self.__dict__.get("_el_ju")
        if ju is None:
            ju = self._el_ju = self._el_control_jac()
        return jx, ju

    def _el_control_jac(self):
        # the electricity residual is linear in the controls
        e = self.el
        L = self.layout.u
        n = e.n
        dS = np.zeros((n, self.nu), dtype=complex)
        cols_s = np.arange(L["s_el"].start, L["s_el"].stop)
        np.add.at(dS, (e.dem_bus, cols_s), e.dem_s)
        cols_g = np.arange(L["gen"].start, L["gen"].stop)
        np.add.at(dS, (e.gen_bus, cols_g), 1 / e.base_mva)
        dS[:, L["cp"]] += self.cp_el.toarray() / e.base_mva
        dS = dS[e.pq]
        return sp.csr_matrix(np.vstack([dS.real, dS.imag]) / ROW_SCALE["el"])

    def _gas_jac(self, xg, u):
        g = self.gas
        p, f = g.split(xg)
        _, dterm = g.friction(f)
        npipe = len(g.pipes)
        nsl = g.n - 1
        col_of = -np.ones(g.n, dtype=int)
        col_of[g.ns] = np.arange(nsl)
        rows, cols, vals = [], [], []
        k = np.arange(npipe)
        for end, sgn in ((g.a, 2.0), (g.b, -2.0)):
            mask = col_of[end] >= 0
            rows += list(k[mask])
            cols += list(col_of[end][mask])
            vals += list(sgn * p[end][mask] / ROW_SCALE["weymouth"])
        rows += list(k)
        cols += list(nsl + k)
        vals += list(-g.K * dterm / ROW_SCALE["weymouth"])
        # mass balance rows
        row_of = col_of
        for end, sgn in ((g.b, 1.0), (g.a, -1.0)):
            mask = row_of[end] >= 0
            rows += list(npipe + row_of[end][mask])
            cols += list(nsl + k[mask])
            vals += [sgn / ROW_SCALE["gas_mass"]] * int(mask.sum())
        jx = _coo(rows, cols, vals, (npipe + nsl, nsl + npipe))

        L = self.layout.u
        ru, cu, vu = [], [], []
        for j, (jj, m) in enumerate(zip(g.dem_j, g.dem_m)):
            if row_of[jj] >= 0:
                ru.append(npipe + row_of[jj])
                cu.append(L["s_gas"].start + j)
                vu.append(m / ROW_SCALE["gas_mass"])
        for j, jj in enumerate(g.src_j):
            if row_of[jj] >= 0:
                ru.append(npipe + row_of[jj])
                cu.append(L["src"].start + j)
                vu.append(1 / ROW_SCALE["gas_mass"])
        cp = self.cp_gas.tocoo()
        for r_, c_, v_ in zip(cp.row, cp.col, cp.data):
            if row_of[r_] >= 0:
                ru.append(npipe + row_of[r_])
                cu.append(L["cp"].start + c_)
                vu.append(v_ / ROW_SCALE["gas_mass"])
        ju = _coo(ru, cu, vu, (npipe + nsl, self.nu))
        return jx, ju

    def _heat_jac(self, xh, u):
        h = self.heat
        T, m, p = h.split(xh)
        nm = h.m
        L = self.layout.u
        pos = h.pos  # junction -> local column of T / p, pipe feeding it
        shed = u[L["s_heat"]]
        md, dT = self._heat_demand_flow(T, u)
        rows, cols, vals = [], [], []
        ru, cu, vu = [], [], []
        sm, se = ROW_SCALE["heat_mass"], ROW_SCALE["heat_energy"]
        # mass rows (0..nm): inflow m_i minus child flows minus demands
        for i in range(nm):
            rows.append(i)
            cols.append(nm + i)
            vals.append(1 / sm)
            a = h.a[i]
            if a != h.root:
                rows.append(pos[a])
                cols.append(nm + i)
                vals.append(-1 / sm)
        for d, (jj, hd) in enumerate(zip(h.dem_j, h.dem_h)):
            if jj == h.root:
                continue
            r_ = pos[jj]
            # -md = -(1-S) H / (C dT); d/dT = (1-S) H / (C dT^2)
            rows.append(r_)
            cols.append(r_)
            vals.append((1 - shed[d]) * hd * MW / (h.C * dT[d] ** 2) / sm)
            ru.append(r_)
            cu.append(L["s_heat"].start + d)
            vu.append(hd * MW / (h.C * dT[d]) / sm)
        # energy rows (nm..2nm)
        k = 2 * np.pi * h.kins * h.L
        Ta, Tb = T[h.a], T[h.b]
        bracket = h.C * (Tb - Ta) + k * ((Ta + Tb) / 2 - h.t_ext)
        for i in range(nm):
            r_ = nm + i
            mm = m[i] + EPS_FLOW
            rows += [r_, r_]
            cols += [i, nm + i]
            vals += [mm * (h.C + k[i] / 2) / se, bracket[i] / se]
            a = h.a[i]
            if a != h.root:
                rows.append(r_)
                cols.append(pos[a])
                vals.append(mm * (-h.C + k[i] / 2) / se)
        for j, jj in enumerate(h.prod_j):
            if jj != h.root:
                ru.append(nm + pos[jj])
                cu.append(L["prod"].start + j)
                vu.append(-MW / se)
        cp = self.cp_heat.tocoo()
        for r_, c_, v_ in zip(cp.row, cp.col, cp.data):
            if r_ != h.root:
                ru.append(nm + pos[r_])
                cu.append(L["cp"].start + c_)
                vu.append(-MW * v_ / se)
        # pressure rows (2nm..3nm)
        _, dterm = h.friction(m)
        sp_ = ROW_SCALE["heat_pressure"]
        for i in range(nm):
            r_ = 2 * nm + i
            rows += [r_, r_]
            cols += [2 * nm + i, nm + i]
            vals += [-1 / sp_, -h.Kdw[i] * dterm[i] / sp_]
            a = h.a[i]
            if a != h.root:
                rows.append(r_)
                cols.append(2 * nm + pos[a])
                vals.append(1 / sp_)
        jx = _coo(rows, cols, vals, (3 * nm, 3 * nm))
        ju = _coo(ru, cu, vu, (3 * nm, self.nu))
        return jx, ju

    # ---------------------------------------------------------------- derived quantities

    def el_slack_power(self, x, u):
        """Slack injection (MW, Mvar) required by the state."""
        e = self.el
        V, vm, _ = e.voltage(x[self.layout.x["el"]])
        s_calc = V[e.slack] * np.conj(e.Ybus[e.slack] @ V)[0]
        s = (s_calc - self._el_sched(vm, u)[e.slack]) * e.base_mva
        return s.real, s.imag

    def el_slack_grad(self, x, u):
        """Gradient of the slack active power (MW) w.r.t. ``x`` and ``u``."""
        e = self.el
        V, vm, _ = e.voltage(x[self.layout.x["el"]])
        dVa, dVm = self._el_dscalc(V, vm)
        s = e.slack
        gx = np.zeros(self.nx)
        sl = self.layout.x["el"]
        k = e.n - 1
        row_a = dVa[s, e.pq].real
        row_m = dVm[s, e.pq].real
        gx[sl.start : sl.start + k] = row_a * e.base_mva
        gx[sl.start + k : sl.stop] = row_m * e.base_mva
        gu = np.zeros(self.nu)
        L = self.layout.u
        for d, b in enumerate(e.dem_bus):
            if b == s:
                gu[L["s_el"].start + d] = -e.dem_s[d].real * e.base_mva
        for j, b in enumerate(e.gen_bus):
            if b == s:
                gu[L["gen"].start + j] = -1.0
        gu[L["cp"]] = -np.asarray(self.cp_el[s].todense()).ravel()
        return gx, gu

    def gas_slack_import(self, x, u):
        g = self.gas
        _, f = g.split(x[self.layout.x["gas"]])
        bal = physics.mass_balance_residuals(g.n, g.a, g.b, f, self._gas_injection(u))
        return -bal[g.slack]

    def gas_slack_grad(self, x, u):
        g = self.gas
        gx = np.zeros(self.nx)
        sl = self.layout.x["gas"]
        off = sl.start + g.n - 1
        gx[off : sl.stop] = -(np.where(g.b == g.slack, 1.0, 0.0) - np.where(g.a == g.slack, 1.0, 0.0))
        gu = np.zeros(self.nu)
        L = self.layout.u
        for d, j in enumerate(g.dem_j):
            if j == g.slack:
                gu[L["s_gas"].start + d] = -g.dem_m[d]
        for s_, j in enumerate(g.src_j):
            if j == g.slack:
                gu[L["src"].start + s_] = -1.0
        gu[L["cp"]] = -np.asarray(self.cp_gas[g.slack].todense()).ravel()
        return gx, gu

    def heat_root_supply(self, x, u):
        """Heat (MW) the root plant supplies: flow heated from return to supply temperature."""
        h = self.heat
        T, m, _ = h.split(x[self.layout.x["heat"]])
        md, _ = self._heat_demand_flow(T, u)
        flow = m[h.a == h.root].sum() + md[h.dem_j == h.root].sum()
        return flow * h.C * (h.t_sup - h.t_ret) / MW - self._heat_injection(u)[h.root]

    def heat_root_grad(self, x, u):
        h = self.heat
        gx = np.zeros(self.nx)
        sl = self.layout.x["heat"]
        c = h.C * (h.t_sup - h.t_ret) / MW
        gx[sl.start + h.m : sl.start + 2 * h.m] = np.where(h.a == h.root, c, 0.0)
        gu = np.zeros(self.nu)
        L = self.layout.u
        for d, j in enumerate(h.dem_j):
            if j == h.root:
                gu[L["s_heat"].start + d] = -h.dem_h[d]
        for j, jj in enumerate(h.prod_j):
            if jj == h.root:
                gu[L["prod"].start + j] = -1.0
        gu[L["cp"]] = -np.asarray(self.cp_heat[h.root].todense()).ravel()
        return gx, gu

    def branch_flows(self, x):
        """Complex from/to branch powers in pu and the bus voltages."""
        e = self.el
        V, vm, _ = e.voltage(x[self.layout.x["el"]])
        sf = V[e.f_idx] * np.conj(e.Yf @ V)
        st = V[e.t_idx] * np.conj(e.Yt @ V)
        return sf, st, V, vm

    def loading_constraints(self, x, limit=1.0, jac=True):
        """``limit vm - |S| / Imax`` at both line ends, with Jacobian.

        This is the current limit ``|I| <= limit Imax`` multiplied through by
        the end voltage; it stays close to linear in the transported power.
        Nonnegative values mean the line is within ``limit`` times its rating.
        With ``jac=False`` only the values are returned.
        """
        e = self.el
        nl = len(e.lines)
        if nl == 0:
            return (np.zeros(0), np.zeros((0, self.nx))) if jac else np.zeros(0)
        V, vm, _ = e.voltage(x[self.layout.x["el"]])
        dense = e.__dict__.get("_dense")
        if dense is None:
            dense = [(Yb.toarray(), idx, C.toarray()) for Yb, idx, C in ((e.Yf, e.f_idx, e.Cf), (e.Yt, e.t_idx, e.Ct))]
            e._dense = dense
        imax = e.imax_pu
        vals, jacs = [], []
        for Yb, idx, C in dense:
            I = Yb @ V
            Vb = V[idx]
            S = Vb * np.conj(I)
            absS = np.abs(S)
            vals.append(limit * vm[idx] - absS / imax)
            if not jac:
                continue
            Vn = V / vm
            dS_dVa = 1j * (np.conj(I)[:, None] * C * V[None, :] - Vb[:, None] * np.conj(Yb * V[None, :]))
            dS_dVm = Vb[:, None] * np.conj(Yb * Vn[None, :]) + np.conj(I)[:, None] * C * Vn[None, :]
            w = (1.0 / (imax * np.maximum(absS, 1e-12)))[:, None]
            da = -w * (S.real[:, None] * dS_dVa.real + S.imag[:, None] * dS_dVa.imag)
            dm = C * limit - w * (S.real[:, None] * dS_dVm.real + S.imag[:, None] * dS_dVm.imag)
            jacs.append(np.hstack([da[:, e.pq], dm[:, e.pq]]))
        g = np.concatenate(vals)
        if not jac:
            return g
        full = np.zeros((2 * nl, self.nx))
        full[:, self.layout.x["el"]] = np.vstack(jacs)
        return g, full
