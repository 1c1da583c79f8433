"""Exception hierarchy shared across the package.

Every error carries a stable class name; the CLI serializes that name into its
machine-readable error records, so renaming a class is a wire change.
"""

from __future__ import annotations


class AgenticOcrError(Exception):
    """Base class for all package errors."""

    #: Transport-level faults that a caller may retry.
    retryable: bool = False


# geometry
class InvalidBox(AgenticOcrError, ValueError):
    pass


class DegenerateBox(AgenticOcrError, ValueError):
    pass


class OutOfFrame(AgenticOcrError, ValueError):
    pass


# metrics / reward
class EmptyGroundTruth(AgenticOcrError, ValueError):
    pass


class EmptyPrediction(AgenticOcrError, ValueError):
    pass


class EmptyJudgmentSet(AgenticOcrError, ValueError):
    pass


class NotPositiveSample(AgenticOcrError, ValueError):
    pass


# toolkit
class BackendUnavailable(AgenticOcrError):
    retryable = True


class BackendMalformed(AgenticOcrError):
    pass


class UnscriptedInput(AgenticOcrError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


# agent
class MalformedToolCall(AgenticOcrError, ValueError):
    pass


class MalformedEvidence(AgenticOcrError, ValueError):
    pass


class ModelUnavailable(AgenticOcrError):
    retryable = True


class TurnBudgetExhausted(AgenticOcrError):
    pass


# curation
class VerifierUnavailable(AgenticOcrError):
    retryable = True


class WrongRolloutCount(AgenticOcrError, ValueError):
    pass


# pipeline
class MissingOcrText(AgenticOcrError, ValueError):
    pass


class GeneratorUnavailable(AgenticOcrError):
    retryable = True


# cli
class ConfigInvalid(AgenticOcrError):
    pass


class InputUnreadable(AgenticOcrError):
    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.path = path
        self.line = line
