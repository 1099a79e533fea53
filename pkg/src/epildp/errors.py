"""Exception types shared across the package."""


class EpiLdpError(Exception):
    """Base class for all package errors."""


class DomainError(EpiLdpError):
    """A state lies outside the model domain."""


class SingularSystemError(EpiLdpError):
    """The implicit-scheme linear system is numerically singular."""


class BlowupError(EpiLdpError):
    """The closed-form ODE solution has a vanishing denominator."""


class NonHyperbolicError(EpiLdpError):
    """An equilibrium eigenvalue has (numerically) zero real part."""


class NotBistableError(EpiLdpError):
    """Fewer than two stable equilibria; no basin boundary to compute."""


class BoundaryXError(EpiLdpError):
    """The closed-form SIS Lagrangian is not defined at x in {0, 1}."""


class RepairExhaustedError(EpiLdpError):
    """Leap-halving repair reached its iteration cap with the state still outside the domain."""
