"""Exception hierarchy.

Every error carries an exit code used by the command line interface:
2 for configuration problems, 3 for bad data, 4 for numerical failures.
"""


class SeriregError(Exception):
    exit_code = 1


class ConfigError(SeriregError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class DataError(SeriregError):
    exit_code = 3


class MissingSlice(DataError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DimensionMismatch(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class IoFailure(DataError):
    pass


class HeaderMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class ConventionMismatch(DataError):
    pass


class SliceSetMismatch(DataError):
    pass


class EmptyMask(DataError):
    pass


class FlatImage(DataError):
    pass


class NumericalError(SeriregError):
    exit_code = 4


class NotConverged(NumericalError):
    def __init__(self, message, residual=float("nan"), slice_index=None):
        super().__init__(message)
        self.residual = residual
        self.slice_index = slice_index


class NonFinite(NumericalError):
    pass
