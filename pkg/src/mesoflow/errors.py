"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: contract/parameter problems
exit 2, io/data problems exit 3, training divergence exits 4.
"""


class MesoflowError(Exception):
    """Base class for all package errors."""


class ContractError(MesoflowError):
    """An argument violates an operation's contract (shapes, ordering, ranges)."""


class ParameterError(ContractError):
    """A configuration or scene parameter is out of its allowed bounds."""


class ValidationError(MesoflowError):
    """Data content is invalid (non-finite values, impossible dimensions)."""


class DegenerateDataError(ValidationError):
    """Data has no usable variation (e.g. constant pixels, zero std)."""


class FormatError(MesoflowError):
    """A file does not parse as the expected container format.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class GridRangeError(MesoflowError):
    """A coordinate falls outside the pixel grid."""


class CheckpointError(MesoflowError):
    """A checkpoint is unreadable or does not match the constructed model."""


class DivergenceError(MesoflowError):
    """Training produced a non-finite loss.

    Carries the last finite-loss model state so callers can salvage it.
    """

    def __init__(self, message: str, step: int, last_good_state=None):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state
