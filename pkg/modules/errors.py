"""
Exception hierarchy for the off-policy evaluation framework.

Every error raised on purpose by the modules derives from OffPolicyError.
Data problems are also ValueErrors, numerical failures RuntimeErrors, so callers
that only catch builtin exceptions keep working.
"""


class OffPolicyError(Exception):
    """Base class for all framework errors."""


# ====================
# 1. Dataset / CSV errors
# ====================

class DatasetError(OffPolicyError, ValueError):
    """A dataset violates a Trajectory or Dataset invariant."""


class EmptyDataset(DatasetError):
    pass


class RaggedTrajectories(DatasetError):
    pass


class DimensionMismatch(DatasetError):
    pass


class ActionOutOfRange(DatasetError):
    pass


class NonFiniteInput(DatasetError):
    pass


class MissingColumn(DatasetError):
    pass


class NonContiguousTime(DatasetError):
    pass


class AdjacencyViolation(DatasetError):
    pass


class InvalidPolicyOutput(OffPolicyError, ValueError):
    pass


class ConfigError(OffPolicyError, ValueError):
    """Run configuration failed schema validation."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


# ====================
# 2. Kernel errors
# ====================

class DegenerateStates(OffPolicyError, ValueError):
    pass


class AnchorDegenerate(OffPolicyError, ValueError):
    pass


# ====================
# 3. Estimation / inference errors
# ====================

class SingularSystem(OffPolicyError, RuntimeError):
    pass


class MismatchedFits(OffPolicyError, ValueError):
    pass


class IndexOutOfRange(OffPolicyError, IndexError):
    pass


class TooFewTrajectories(OffPolicyError, ValueError):
    pass


class EmptyValidation(OffPolicyError, ValueError):
    pass


# ====================
# 4. Simulator / study errors
# ====================

class NotIrreducible(OffPolicyError, ValueError):
    pass


class NoStationaryDistribution(OffPolicyError, RuntimeError):
    pass


class StudyFailed(OffPolicyError, RuntimeError):
    pass
