"""Exception hierarchy.

Every error raised by the package derives from :class:`BMSError`. The CLI maps
:class:`DataError` subclasses to exit code 2 and :class:`NumericError` to 3.
"""


class BMSError(Exception):
    pass


class DataError(BMSError):
    pass


class NumericError(BMSError):
    pass


class MissingValue(DataError):
    pass


class NotFound(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SchemaMismatch(DataError):
    pass


class InvalidTime(DataError):
    pass


class InvalidAmount(DataError):
    pass


class NoLabels(DataError):
    pass


class RuleError(DataError):
    pass


class GraphError(DataError):
    pass


class ShapeError(NumericError, ValueError):
    pass


class MissingEmbedding(DataError):
    pass


class EmptyBehavior(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class EmptyEval(DataError):
    pass


class EmptyHistory(DataError):
    pass


class InvalidK(DataError, ValueError):
    pass


class TooManyNodes(DataError):
    pass


class InfeasibleConfig(DataError):
    pass


class EmptyInput(DataError):
    pass
