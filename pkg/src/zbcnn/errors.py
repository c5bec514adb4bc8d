"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ZbcnnError(Exception):
    exit_code = 1


class UsageError(ZbcnnError):
    exit_code = 1


class ShapeError(UsageError):
    pass


class DomainError(UsageError):
    pass


class SizeError(UsageError):
    pass


class DataError(ZbcnnError):
    exit_code = 2


class IngestionError(DataError):
    pass


class FormatError(DataError):
    pass


class NumericError(ZbcnnError):
    exit_code = 3
