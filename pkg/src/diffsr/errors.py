"""Exception hierarchy shared across the pipeline."""


class DiffSRError(Exception):
    """Base class for every error raised by this package."""


class UnitsError(DiffSRError):
    pass


class ShapeError(DiffSRError):
    pass


class FormatError(DiffSRError):
    """Malformed or truncated on-disk artifact."""


class DtypeMismatchError(FormatError):
    pass


class PatchError(DiffSRError):
    pass


class CoverageError(PatchError):
    """A pixel is not covered by any patch during reassembly."""


class NonFiniteError(DiffSRError):
    """A NaN/inf showed up where a finite value is required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(NonFiniteError):
    pass


class ConfigError(DiffSRError):
    pass


class ConditionError(DiffSRError):
    pass


class RunLockedError(DiffSRError):
    pass
