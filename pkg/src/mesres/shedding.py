"""Minimal load shedding of a degraded multi-energy network.

The optimisation runs over the control variables (shedding coefficients and
unit set points); the network state is eliminated by a Newton flow solve at
every trial point.  Voltage, pressure and temperature limits, line loading and
the slack import caps are inequality constraints whose gradients come from the
flow sensitivities.  The objective is the shed demand power in MW summed over
carriers.

Carriers that are not linked by an active coupling point are independent
subproblems and are solved separately.  A subproblem whose nominal operating
point already satisfies every limit needs no optimisation at all.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from mesres.bounds import OperationalBounds
from mesres.errors import DivergenceError, SheddingStallError, SingularJacobianError
from mesres.flow.solver import newton
from mesres.flow.system import FlowSystem
from mesres.model.degrade import DegradedNetwork, degrade, healthy
from mesres.model.network import Carrier, MultiEnergyNetwork, component_id

log = logging.getLogger(__name__)

#: normalisation of the slack caps in constraint space (MW, 10 g/s, MW)
_CAP_SCALE = {Carrier.ELECTRICITY: 1.0, Carrier.GAS: 1.0e-2, Carrier.HEAT: 1.0}
#: the optimiser targets limits tightened by this much so polished points stay inside
_MARGIN = 1e-7


def evaluate_objective(S: Mapping, demands: Mapping) -> float:
    """Weighted shed power ``sum_d S_d P_d``.

    ``S`` and ``demands`` map the same demand keys to a coefficient and a power.
    """
    return float(sum(S[k] * p for k, p in demands.items()))


@dataclass
class SheddingSolution:
    """Optimal shedding of one degraded network."""

    #: ``(carrier, demand id) -> S`` for every demand of the base network
    shed: dict
    #: shed power (MW) per carrier
    ls_by_carrier: dict
    feasible: bool
    #: set points of the units that were optimised, keyed by component id
    dispatch: dict = field(default_factory=dict)
    max_violation: float = 0.0
    method: str = "nominal"

    @property
    def ls(self) -> float:
        return float(sum(self.ls_by_carrier.values()))

    def to_dict(self) -> dict:
        return {
            "ls_mw": self.ls,
            "ls_by_carrier": {c.short: v for c, v in self.ls_by_carrier.items()},
            "feasible": self.feasible,
            "max_violation": self.max_violation,
            "method": self.method,
            "shed": [[c.short, d, s] for (c, d), s in sorted(self.shed.items())],
            "dispatch": dict(sorted(self.dispatch.items())),
        }


def carrier_groups(dnet: DegradedNetwork) -> list[tuple[Carrier, ...]]:
    """Sets of carriers coupled through active coupling points."""
    parent = {c: c for c in Carrier}

    def find(c):
        while parent[c] != c:
            c = parent[c]
        return c

    for cp in dnet.base.coupling_points:
        if not dnet.is_active(component_id("cp", cp.id)):
            continue
        cs = cp.carriers()
        for c in cs[1:]:
            parent[find(c)] = find(cs[0])
    groups: dict = {}
    for c in Carrier:
        groups.setdefault(find(c), []).append(c)
    return sorted((tuple(sorted(g)) for g in groups.values()), key=lambda g: g[0])


# --------------------------------------------------------------------------- constraint evaluation


class _Problem:
    """Scaled NLP for one carrier group."""

    def __init__(self, fs: FlowSystem, bounds: OperationalBounds, caps: dict):
        self.fs = fs
        self.bounds = bounds
        self.caps = caps
        self.xs = fs.x_scale()
        self.us = fs.u_scale()
        self.w = fs.demand_power()
        self.ulo, self.uhi = fs.u_bounds()
        self.xlo, self.xhi = self._x_bounds()
        self.nx, self.nu = fs.nx, fs.nu
        self._bidx = np.flatnonzero(np.isfinite(self.xlo))
        self._bnorm = self._x_norm()[self._bidx]

    def _x_bounds(self):
        fs, b = self.fs, self.bounds
        lo = np.full(fs.nx, -np.inf)
        hi = np.full(fs.nx, np.inf)
        if fs.el:
            sl = fs.layout.x["el"]
            k = fs.el.n - 1
            lo[sl.start + k : sl.stop] = b.v_min
            hi[sl.start + k : sl.stop] = b.v_max
        if fs.gas:
            sl = fs.layout.x["gas"]
            k = fs.gas.n - 1
            plo, phi = b.pressure_limits(fs.gas.slack_p)
            lo[sl.start : sl.start + k] = plo
            hi[sl.start : sl.start + k] = phi
        if fs.heat:
            sl = fs.layout.x["heat"]
            m = fs.heat.m
            lo[sl.start : sl.start + m] = b.t_min
            hi[sl.start : sl.start + m] = b.t_max
        return lo, hi

    # normalisation of state bound violations
    def _x_norm(self):
        fs = self.fs
        n = np.ones(fs.nx)
        if fs.gas:
            sl = fs.layout.x["gas"]
            n[sl.start : sl.start + fs.gas.n - 1] = fs.gas.slack_p
        return n

    def _caps(self):
        fs = self.fs
        out = []
        for carrier, block, val_fn, grad_fn in (
            (Carrier.ELECTRICITY, fs.el, lambda x, u: fs.el_slack_power(x, u)[0], fs.el_slack_grad),
            (Carrier.GAS, fs.gas, fs.gas_slack_import, fs.gas_slack_grad),
            (Carrier.HEAT, fs.heat, fs.heat_root_supply, fs.heat_root_grad),
        ):
            cap = self.caps.get(carrier)
            if block is not None and cap is not None:
                out.append((cap, _CAP_SCALE[carrier], val_fn, grad_fn))
        return out

    def ineq(self, x, u, margin=0.0, jac=True):
        """Inequality values ``g >= 0`` and, with ``jac``, dense Jacobians in ``x`` and ``u``."""
        fs = self.fs
        vals, jx, ju = [], [], []
        if fs.el and len(fs.el.lines):
            out = fs.loading_constraints(x, limit=self.bounds.lp_max / 100.0, jac=jac)
            g = out[0] if jac else out
            vals.append(g - margin)
            if jac:
                jx.append(out[1])
                ju.append(np.zeros((len(g), fs.nu)))
        for cap, s, val_fn, grad_fn in self._caps():
            vals.append(np.array([(cap - val_fn(x, u)) / s - margin]))
            if jac:
                gx, gu = grad_fn(x, u)
                jx.append(-gx[None, :] / s)
                ju.append(-gu[None, :] / s)
        g = np.concatenate(vals) if vals else np.zeros(0)
        if not jac:
            return g
        if not vals:
            return g, np.zeros((0, fs.nx)), np.zeros((0, fs.nu))
        return g, np.vstack(jx), np.vstack(ju)

    def violation(self, x, u) -> float:
        """Largest normalised violation of bounds and inequalities at ``(x, u)``."""
        return float(np.max(-self.constraints(x, u), initial=0.0))

    # ------------------------------------------------------------ reduced-space NLP

    def constraints(self, x, u, jac=False):
        """All inequalities ``g >= 0``: state bounds, loading and slack caps."""
        b, nb = self._bidx, self._bnorm
        gb = np.r_[(x[b] - self.xlo[b]) / nb, (self.xhi[b] - x[b]) / nb]
        if not jac:
            return np.r_[gb, self.ineq(x, u, jac=False)]
        g, jx, ju = self.ineq(x, u)
        E = np.zeros((len(b), self.nx))
        E[np.arange(len(b)), b] = 1.0 / nb
        Gx = np.vstack([E, -E, jx])
        Gu = np.vstack([np.zeros((2 * len(b), self.nu)), ju])
        return np.r_[gb, g], Gx, Gu

    def physical(self, x) -> bool:
        """Heat states must stay above the return temperature (the demand model is singular there)."""
        h = self.fs.heat
        if h is None:
            return True
        T, _, _ = h.split(x[self.fs.layout.x["heat"]])
        return bool(np.all(T > h.t_ret + 1.0))

    def sensitivities(self, x, u):
        """``dx/du`` at a converged state (dense ``nx x nu``)."""
        if self.nx == 0:
            return np.zeros((0, self.nu))
        jx, ju = self.fs.jacobian(x, u)
        return spla.splu(sp.csc_matrix(jx)).solve(-ju.toarray())

    def optimise(self, u0, x0=None, max_iter=200):
        """SLSQP over the controls with the state eliminated by Newton solves.

        Every trial control vector gets its own flow solution, so iterates
        always satisfy the flow equations.  Constraint gradients come from the
        implicit-function sensitivities ``dx/du``.  Returns ``(x, u, iterations)``.
        """
        fs, us = self.fs, self.us
        u_start = np.clip(np.asarray(u0, dtype=float), self.ulo, self.uhi)
        x_start, _, _ = newton(fs, u_start, x0=x0)
        memo = {"key": None, "last_x": x_start}

        def state(v):
            key = v.tobytes()
            if memo["key"] == key:
                return memo["val"]
            u = np.clip(v * us, self.ulo, self.uhi)
            try:
                x, _, _ = newton(fs, u, x0=memo["last_x"])
                ok = self.physical(x)
            except (DivergenceError, SingularJacobianError):
                ok = False
            if ok:
                memo["last_x"] = x
                g, Gx, Gu = self.constraints(x, u, jac=True)
                A = (Gx @ self.sensitivities(x, u) + Gu) * us[None, :]
                val = (x, u, g - _MARGIN, A)
            else:
                val = None
            memo["key"], memo["val"] = key, val
            return val

        ref = {"m": len(self.constraints(x_start, u_start))}

        def cons(v):
            st = state(v)
            return np.full(ref["m"], -1.0e3) if st is None else st[2]

        def cons_jac(v):
            st = state(v)
            return np.zeros((ref["m"], self.nu)) if st is None else st[3]

        wv = self.w * us
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(
                lambda v: (float(wv @ v), wv),
                u_start / us,
                jac=True,
                method="SLSQP",
                bounds=list(zip(self.ulo / us, self.uhi / us)),
                constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}] if ref["m"] else [],
                options={"maxiter": max_iter, "ftol": 1e-7},
            )
        st = state(res.x)
        if st is None:
            return memo["last_x"], u_start, res.nit
        return st[0], st[1], res.nit


# --------------------------------------------------------------------------- optimiser


class LoadShedder:
    """Load-shedding optimiser bound to one base network.

    The slack import caps are the imports of the healthy network at nominal
    dispatch, so a degraded network may not draw more from outside than the
    intact one does.  Solutions are memoised by failure set.
    """

    def __init__(
        self,
        net: MultiEnergyNetwork,
        bounds: OperationalBounds | None = None,
        *,
        caps: dict | None = None,
        trace_path=None,
        on_stall: str = "raise",
    ):
        self.net = net
        self.bounds = bounds or OperationalBounds()
        self.caps = dict(caps) if caps is not None else base_caps(net)
        self.trace_path = trace_path
        if on_stall not in ("raise", "fallback"):
            raise ValueError("on_stall must be 'raise' or 'fallback'")
        self.on_stall = on_stall
        self._cache: dict = {}
        self.demand_power = net.demand_power_mw()

    def __call__(self, failed) -> SheddingSolution:
        return self.solve(degrade(self.net, failed))

    def solve(self, dnet: DegradedNetwork) -> SheddingSolution:
        key = dnet.failed
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        sol = self._solve(dnet)
        self._cache[key] = sol
        if self.trace_path is not None:
            with open(self.trace_path, "a") as fh:
                rec = {"failed": sorted(dnet.failed), **{k: v for k, v in sol.to_dict().items() if k != "shed"}}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return sol

    def cache_size(self) -> int:
        return len(self._cache)

    def _solve(self, dnet: DegradedNetwork) -> SheddingSolution:
        shed = {}
        for c, ids in (
            (Carrier.ELECTRICITY, [d.id for d in self.net.electricity.demands]),
            (Carrier.GAS, [d.id for d in self.net.gas.demands]),
            (Carrier.HEAT, [d.id for d in self.net.heat.demands]),
        ):
            for d in ids:
                shed[(c, d)] = 0.0
        for k in dnet.dropped_demands:
            shed[k] = 1.0
        feasible, worst, methods, dispatch = True, 0.0, [], {}
        for group in carrier_groups(dnet):
            fs = FlowSystem(dnet, carriers=group)
            if fs.nu == 0 and fs.nx == 0:
                continue
            res = self._solve_group(fs)
            feasible &= res["feasible"]
            worst = max(worst, res["violation"])
            methods.append(res["method"])
            _write_controls(fs, res["u"], shed, dispatch)
        ls = {c: 0.0 for c in Carrier}
        for (c, d), s in shed.items():
            ls[c] += s * self.demand_power[c][d]
        method = "nominal" if all(m == "nominal" for m in methods) else "+".join(sorted(set(methods)))
        return SheddingSolution(shed, ls, bool(feasible), dispatch, worst, method)

    def _solve_group(self, fs: FlowSystem) -> dict:
        prob = _Problem(fs, self.bounds, self.caps)
        tol = self.bounds.tol
        u_nom = fs.u_nominal()
        x_nom = None
        try:
            x_nom, _, _ = newton(fs, u_nom)
            if prob.violation(x_nom, u_nom) <= tol:
                return {"u": u_nom, "feasible": True, "violation": 0.0, "method": "nominal"}
        except (DivergenceError, SingularJacobianError):
            x_nom = None

        # full shedding with every unit off is the fallback operating point
        u_full = np.zeros(fs.nu)
        L = fs.layout.u
        for g in ("s_el", "s_gas", "s_heat"):
            u_full[L[g]] = 1.0
        try:
            x_full, _, _ = newton(fs, u_full)
            v_full = prob.violation(x_full, u_full)
        except (DivergenceError, SingularJacobianError):
            x_full, v_full = None, np.inf

        starts = [(u_nom, x_nom)] if x_nom is not None else []
        if x_full is not None:
            starts.append((u_full, x_full))
        diag = []
        for u0, x0 in starts:
            try:
                x, u, it = prob.optimise(u0, x0)
            except (DivergenceError, SingularJacobianError) as exc:
                diag.append({"start": "nominal" if u0 is u_nom else "full", "error": str(exc)})
                continue
            v = prob.violation(x, u)
            diag.append({"start": "nominal" if u0 is u_nom else "full", "iterations": it, "violation": v})
            if v <= tol:
                return {"u": u, "feasible": True, "violation": v, "method": "nlp"}
        if v_full <= tol:
            if self.on_stall == "raise":
                raise SheddingStallError(
                    f"optimiser found no feasible point for carriers {[c.short for c in fs.carriers]}",
                    {"attempts": diag, "failed": sorted(fs.dnet.failed)},
                )
            log.warning("shedding stalled for %s; using full shedding", sorted(fs.dnet.failed))
            return {"u": u_full, "feasible": True, "violation": v_full, "method": "full-shed"}
        return {"u": u_full, "feasible": False, "violation": float(v_full), "method": "infeasible"}


def _write_controls(fs: FlowSystem, u, shed: dict, dispatch: dict):
    L = fs.layout.u
    if fs.el:
        for k, d in enumerate(fs.el.demands):
            shed[(Carrier.ELECTRICITY, d.id)] = float(u[L["s_el"].start + k])
        for k, g in enumerate(fs.el.gens):
            dispatch[component_id("generator", g.id)] = float(u[L["gen"].start + k])
    if fs.gas:
        for k, d in enumerate(fs.gas.demands):
            shed[(Carrier.GAS, d.id)] = float(u[L["s_gas"].start + k])
        for k, s in enumerate(fs.gas.sources):
            dispatch[component_id("gas_source", s.id)] = float(u[L["src"].start + k])
    if fs.heat:
        for k, d in enumerate(fs.heat.demands):
            shed[(Carrier.HEAT, d.id)] = float(u[L["s_heat"].start + k])
        for k, p in enumerate(fs.heat.producers):
            dispatch[component_id("heat_producer", p.id)] = float(u[L["prod"].start + k])
    for k, cp in enumerate(fs.cps):
        dispatch[component_id("cp", cp.id)] = float(u[L["cp"].start + k])


def base_caps(net: MultiEnergyNetwork) -> dict:
    """Slack import caps from the healthy nominal operating point.

    Explicit network limits take precedence; negative imports (exports) give a
    cap of zero.
    """
    dnet = healthy(net)
    fs = FlowSystem(dnet)
    u = fs.u_nominal()
    x, _, _ = newton(fs, u)
    caps = {}
    if fs.el:
        lim = net.electricity.slack_max_import_mw
        caps[Carrier.ELECTRICITY] = lim if lim is not None else max(fs.el_slack_power(x, u)[0], 0.0)
    if fs.gas:
        lim = net.gas.slack_max_import_kg_s
        caps[Carrier.GAS] = lim if lim is not None else max(fs.gas_slack_import(x, u), 0.0)
    if fs.heat:
        lim = net.heat.slack_max_supply_mw
        caps[Carrier.HEAT] = lim if lim is not None else max(fs.heat_root_supply(x, u), 0.0)
    return caps


def optimize_load_shedding(
    degraded: DegradedNetwork, bounds: OperationalBounds | None = None, **kwargs
) -> SheddingSolution:
    """Minimal shedding of ``degraded`` under ``bounds``."""
    return LoadShedder(degraded.base, bounds, **kwargs).solve(degraded)
