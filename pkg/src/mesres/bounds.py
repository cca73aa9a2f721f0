"""Operational limits used by load shedding and feasibility checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from mesres.errors import ConfigError


@dataclass(frozen=True)
class OperationalBounds:
    """Box limits on the network state.

    Gas pressure limits are relative to the slack pressure.  Line loading is in
    percent of the thermal current rating.
    """

    v_min: float = 0.9
    v_max: float = 1.1
    lp_min: float = 0.0
    lp_max: float = 100.0
    p_rel_min: float = 0.8
    p_rel_max: float = 1.2
    t_min: float = 328.15
    t_max: float = 368.15
    #: tolerance used when checking a solution against the limits
    tol: float = 1e-5

    def __post_init__(self):
        problems = []
        for lo, hi in (("v_min", "v_max"), ("lp_min", "lp_max"), ("p_rel_min", "p_rel_max"), ("t_min", "t_max")):
            if not getattr(self, lo) < getattr(self, hi):
                problems.append(f"{lo} must be below {hi}")
        if problems:
            raise ConfigError(problems)

    def pressure_limits(self, slack_pressure: float) -> tuple[float, float]:
        return self.p_rel_min * slack_pressure, self.p_rel_max * slack_pressure

    def to_dict(self) -> dict:
        return asdict(self)
