"""Exception hierarchy shared by all subsystems."""


class MesError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(MesError):
    """A network document references something that does not exist or is malformed."""


class DegenerateFlowError(MesError):
    """An edge weight was requested for a branch that carries no usable flow."""


class OrientationError(MesError):
    """Upstream/downstream ordering of an edge contradicts the solved state."""


class ZeroGradientError(MesError):
    """A heat pipe has identical inlet and outlet temperature."""


class ContractViolation(MesError, ValueError):
    """A caller passed arguments outside the documented domain."""


class GenerationError(MesError):
    """Synthetic network generation could not satisfy its configuration."""


class PlacementError(GenerationError):
    """Not enough candidate sites for the requested coupling points."""


class DivergenceError(MesError):
    """Newton iteration did not converge."""

    def __init__(self, message, residual_report=None):
        super().__init__(message)
        self.residual_report = residual_report or {}


class SingularJacobianError(StructuralError):
    """The flow Jacobian is singular, typically due to an isolated subnetwork."""


class SheddingStallError(MesError):
    """The load-shedding optimizer failed to reach a feasible optimum."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class KatzDivergenceError(MesError):
    """Katz attenuation is at or above the inverse spectral radius."""


class ConfigError(MesError):
    """Scenario configuration failed validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SimulationError(MesError):
    """A step of an event simulation failed; carries the event and step."""

    def __init__(self, message, event_id=None, step=None):
        super().__init__(message)
        self.event_id = event_id
        self.step = step
