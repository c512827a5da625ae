"""Exception and warning classes raised across segkit."""


class SegkitError(Exception):
    """Base class for all segkit errors."""


# frame
class MissingColumn(SegkitError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TypeOverflow(SegkitError, ValueError):
    pass


class IoFailure(SegkitError, OSError):
    pass


class NonPositiveCpi(SegkitError, ValueError):
    pass


class EmptyAfterDeletion(SegkitError, ValueError):
    pass


# estimators
class RankDeficient(SegkitError, ValueError):
    """Design matrix is not of full column rank.

    ``dependent`` lists the columns found to be linear combinations of the
    others.
    """

    def __init__(self, message, dependent=()):
        super().__init__(message)
        self.dependent = list(dependent)


class TooFewRows(SegkitError, ValueError):
    pass


class NoVariationInY(SegkitError, ValueError):
    pass


class PerfectSeparation(SegkitError, ValueError):
    pass


class MaxIterations(SegkitError, RuntimeError):
    pass


# segregation / shift-share
class ZeroGenderTotal(SegkitError, ValueError):
    pass


class GroupTooSmall(SegkitError, ValueError):
    pass


class UnknownBaseTime(SegkitError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# matching
class NoControls(SegkitError, ValueError):
    pass


class EmptySupport(SegkitError, ValueError):
    pass


# kbo / counterfactual
class ColumnMismatch(SegkitError, ValueError):
    pass


class StratumTooSmall(SegkitError, ValueError):
    pass


class EmptyInput(SegkitError, ValueError):
    pass


# synthgen / pipeline
class InvalidSpec(SegkitError, ValueError):
    pass


class ConfigInvalid(SegkitError, ValueError):
    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems) or [message]


class AnalysisFailed(SegkitError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"analysis {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# warnings
class RankWarning(UserWarning):
    pass


class DegenerateColumn(UserWarning):
    pass


class ExtremeWeights(UserWarning):
    pass


class StratumSkipped(UserWarning):
    pass
