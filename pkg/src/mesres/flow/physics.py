"""Pipe hydraulics, heat loss and coupling-point conversions.

All functions are numpy-vectorised over their array arguments.  The friction
term is always evaluated in the product form ``lambda * f|f|``, which equals
``(64 eta A / D) f + PrNi f|f|`` and is smooth through zero flow.
"""

from __future__ import annotations

import numpy as np

from mesres.errors import ContractViolation

#: cap applied to the laminar 64/Re term when the flow (and Re) vanishes
LAMINAR_CAP = 1.0e8


def area(diameter):
    return np.pi * np.asarray(diameter, dtype=float) ** 2 / 4.0


def prandtl_nikuradse(d_in, roughness):
    """Rough-pipe friction ``1 / (2 log10(3.71 D_in / eps))^2``."""
    return 1.0 / (2.0 * np.log10(3.71 * np.asarray(d_in, dtype=float) / roughness)) ** 2


def reynolds(f, diameter, viscosity):
    return np.abs(f) * diameter / (viscosity * area(diameter))


def friction_factor(f, diameter, d_in, roughness, viscosity):
    """lambda = 64/Re + PrNi, with 64/Re capped at zero flow."""
    re = reynolds(f, diameter, viscosity)
    with np.errstate(divide="ignore"):
        laminar = np.where(re > 0, 64.0 / np.where(re > 0, re, 1.0), np.inf)
    return np.minimum(laminar, LAMINAR_CAP) + prandtl_nikuradse(d_in, roughness)


def friction_flow_term(f, diameter, d_in, roughness, viscosity):
    """``lambda(f) * f|f|`` and its derivative with respect to ``f``."""
    f = np.asarray(f, dtype=float)
    lam_lin = 64.0 * viscosity * area(diameter) / diameter
    prni = prandtl_nikuradse(d_in, roughness)
    value = lam_lin * f + prni * f * np.abs(f)
    deriv = lam_lin + 2.0 * prni * np.abs(f)
    return value, deriv


def weymouth_coefficient(length, diameter, gamma_sq):
    """K in ``p_a^2 - p_b^2 = K lambda f|f|`` (Pa^2 s^2/kg^2)."""
    return (length / diameter) * gamma_sq / area(diameter) ** 2


def weymouth_residual(p_a, p_b, f, *, length, diameter, d_in, roughness, viscosity, gamma_sq):
    """Isothermal gas pipe residual in squared pressures (Pa^2)."""
    term, _ = friction_flow_term(f, diameter, d_in, roughness, viscosity)
    return (np.square(p_a) - np.square(p_b)) - weymouth_coefficient(length, diameter, gamma_sq) * term


def weymouth_pressure(p_a, f, **pipe):
    """Downstream pressure that zeroes :func:`weymouth_residual`."""
    term, _ = friction_flow_term(f, pipe["diameter"], pipe["d_in"], pipe["roughness"], pipe["viscosity"])
    sq = np.square(p_a) - weymouth_coefficient(pipe["length"], pipe["diameter"], pipe["gamma_sq"]) * term
    return np.sqrt(sq)


def darcy_coefficient(length, diameter, density):
    """K in ``p_a - p_b = K lambda f|f|`` (Pa s^2/kg^2)."""
    return length / (2.0 * density * diameter * area(diameter) ** 2)


def darcy_weisbach_residual(p_a, p_b, f, *, length, diameter, d_in, roughness, viscosity, density):
    """Water pipe residual: pressure drop along the flow direction (Pa)."""
    term, _ = friction_flow_term(f, diameter, d_in, roughness, viscosity)
    return (np.asarray(p_a) - p_b) - darcy_coefficient(length, diameter, density) * term


def heat_loss(t_a, t_b, f, *, insulation_k, length, t_ext):
    """Heat exchanged with the ground, negative when the pipe is warmer."""
    return -2.0 * np.pi * insulation_k * length * np.asarray(f) * ((np.asarray(t_a) + t_b) / 2.0 - t_ext)


def mass_balance_residuals(n_nodes, from_idx, to_idx, flows, injections=None):
    """Net inflow per node: pipe inflows minus outflows plus injections.

    A pipe flow is positive in its ``from -> to`` direction.  ``injections`` are
    external inflows (sources positive, demands negative).
    """
    res = np.zeros(n_nodes) if injections is None else np.array(injections, dtype=float)
    np.add.at(res, np.asarray(to_idx, dtype=int), flows)
    np.subtract.at(res, np.asarray(from_idx, dtype=int), flows)
    return res


# --------------------------------------------------------------------------- conversions


def chp_conversion(f_gas, eta_el, eta_heat, hhv, unit_el=3.6, unit_heat=3.6):
    """Electric output and heat-exchanger term of a CHP fed with ``f_gas`` kg/s.

    Returns ``(P_el, H_he)`` in MW; ``H_he`` carries the negative sign of the
    heat-exchanger convention, so the heat delivered to the network is ``-H_he``.
    """
    if np.any(np.asarray(f_gas) < 0):
        raise ContractViolation("a CHP cannot produce gas (negative f_gas)")
    p_el = eta_el * np.asarray(f_gas) * unit_el * hhv
    h_he = -eta_heat * np.asarray(f_gas) * unit_heat * hhv
    return p_el, h_he


def p2h_conversion(p_demand, eta_el):
    if np.any(np.asarray(p_demand) < 0):
        raise ContractViolation("P2H input power must be nonnegative")
    return eta_el * np.asarray(p_demand)


def p2g_conversion(p_el, eta_gas, hhv, unit=3.6):
    """Gas mass flow (kg/s) produced from ``p_el`` MW."""
    if np.any(np.asarray(p_el) < 0):
        raise ContractViolation("P2G input power must be nonnegative")
    return eta_gas * np.asarray(p_el) / (unit * hhv)
