"""Exception types shared across the package.

The CLI maps UsageError (and NotFoundError) to exit code 2; every other
LjwError signals a computation that could not be carried out as requested.
"""


class LjwError(Exception):
    """Base class for all package errors."""


class OffManifoldError(LjwError):
    """A point failed the manifold membership test."""


class RankDegeneracyError(LjwError):
    """Numerical rank of the diffusion coefficient is ambiguous or varies."""


class SectionError(LjwError):
    """A vector field is not a section of the required subbundle."""


class StepSizeError(LjwError):
    """A discrete step left the trusted retraction neighbourhood."""


class GridError(LjwError):
    """Requested times do not lie on the simulation grid."""


class PreconditionError(LjwError):
    """An operation's structural precondition is violated (e.g. drift
    outside the image subbundle for the intrinsic filtered flow)."""


class UnsupportedScenarioError(LjwError):
    """Scenario violates a standing hypothesis (e.g. coefficient map not
    injective into vector fields)."""


class UnsupportedOperationError(LjwError):
    """Operation requires structure the object does not carry
    (e.g. differentiating a field flagged non-differentiable)."""


class NotFoundError(LjwError):
    """Unknown registry id; carries a nearest-match hint when available."""


class UsageError(LjwError):
    """Invalid invocation (bad flag value, malformed config)."""
