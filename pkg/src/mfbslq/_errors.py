"""Error taxonomy shared across the solver stack."""


class MfbslqError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(MfbslqError):
    """Bad build parameters: tree depth out of range, malformed documents, bad tables."""


class SpecValidationError(MfbslqError):
    """A problem specification violates the standing positivity/symmetry assumptions."""


class StepSizeError(MfbslqError):
    """A one-step implicit matrix became singular; a finer time grid is required."""


class RiccatiError(MfbslqError):
    """Riccati Newton failed to converge, or a decoupling matrix became singular."""


class InfeasibleEtaError(MfbslqError):
    """The multiplier system admits no solution for the requested mean triple."""


class ConvexityError(MfbslqError):
    """A quadratic form that must be positive semidefinite is not."""


class SizeCapError(MfbslqError):
    """A brute-force oracle was asked to exceed its configured size cap."""


class NumericsError(MfbslqError):
    """An internal consistency probe (affinity/superposition) failed."""
