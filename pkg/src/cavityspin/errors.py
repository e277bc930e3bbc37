"""Exception hierarchy shared by all cavityspin modules."""


class CavitySpinError(Exception):
    """Base class for all package errors."""


class DomainError(CavitySpinError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InvariantViolation(CavitySpinError, RuntimeError):
    """A structural invariant failed; signals corrupted or inconsistent inputs."""


class NumericsError(CavitySpinError, RuntimeError):
    """The numerical state degenerated (non-finite values, broken scheme assumptions)."""


class PositivityError(NumericsError):
    """A vacuum region appeared: the density floor was reached over a whole stencil."""


class InfeasibleProfileError(CavitySpinError, RuntimeError):
    """The steady density profile would be non-positive somewhere.

    Carries the offending cell so callers can report whether the profile
    constant is too small or the rotation rate too large for the given
    pressure stiffness.
    """

    def __init__(self, message, cell=None, value=None):
        super().__init__(message)
        self.cell = cell
        self.value = value


class ConvergenceError(CavitySpinError, RuntimeError):
    """An iterative solver exhausted its iteration budget.

    ``history`` holds the per-iteration error measures for diagnosis.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class CheckpointError(CavitySpinError, RuntimeError):
    """A checkpoint file was rejected (bad magic, version, hash, or truncation)."""


class ConfigError(CavitySpinError, ValueError):
    """A run configuration is malformed or violates a model invariant."""


class CertificationError(CavitySpinError, RuntimeError):
    """A certified run invariant (mass, energy, kinematic constraints) was violated.

    ``invariant`` names the violated quantity.
    """

    def __init__(self, message, invariant=None):
        super().__init__(message)
        self.invariant = invariant
