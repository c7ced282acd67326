"""Exception taxonomy shared across the package.

Each class maps to one process exit code in the CLI, so keep the
hierarchy flat and the meanings disjoint.
"""


class MownetError(Exception):
    """Base class for all package-specific errors."""


class ContractError(MownetError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands with structurally incompatible shapes."""


class CapacityError(MownetError):
    """A class does not hold enough samples for the requested draw."""


class FormatError(MownetError):
    """A serialized artifact (dataset, checkpoint, config) is malformed."""


class NumericError(MownetError):
    """A non-finite value or a failed numeric cross-check."""
