"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 usage/config,
2 data, 3 training divergence.
"""


class PancDetectError(Exception):
    exit_code = 2


class UsageError(PancDetectError):
    exit_code = 1


class InvalidConfig(UsageError):
    pass


class InvalidRange(UsageError):
    pass


class InvalidSpacing(UsageError):
    pass


class DataError(PancDetectError):
    exit_code = 2


class EmptyMask(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ZeroVariance(DataError):
    pass


class DimsTooSmall(DataError):
    pass


class MissingChannel(DataError):
    pass


class MissingDilationFlag(DataError):
    pass


class CorruptArchive(DataError):
    pass


class DataMissing(DataError):
    pass


class TooFewCases(DataError):
    pass


class EmptyInput(DataError):
    pass


class WorkdirLocked(DataError):
    pass


class NonFiniteLoss(PancDetectError):
    exit_code = 3
