"""Exception hierarchy.

Every error raised by the engine derives from :class:`PipertError`. Errors that
surface while a pipeline executes carry a stage path (``Then[1].Plus[0]``) so
a failure deep inside a composed pipeline can be located.
"""

from __future__ import annotations


class PipertError(Exception):
    def __init__(self, message: str = "") -> None:
        super().__init__(message)
        self.message = message
        self.stage_path: list[str] = []

    def push_stage(self, segment: str) -> None:
        self.stage_path.insert(0, segment)

    @property
    def stage(self) -> str:
        return ".".join(self.stage_path)

    def __str__(self) -> str:
        if self.stage_path:
            return f"{self.message} (at {self.stage})"
        return self.message


# datamodel
class UndefinedScore(PipertError):
    pass


class InvalidK(PipertError):
    pass


class ContractViolation(PipertError):
    pass


class NoJudgments(PipertError):
    pass


# index
class DuplicateDocno(PipertError):
    pass


class FormatError(PipertError):
    pass


class DirectIndexMissing(PipertError):
    pass


# retrieval
class DegenerateStats(PipertError):
    pass


class UnknownDocno(PipertError):
    pass


class EmptyFeedback(PipertError):
    pass


# transformers / operators
class MissingResults(PipertError):
    pass


class FeatureNameCollision(PipertError):
    pass


class NotTrained(PipertError):
    pass


class FeatureLengthMismatch(PipertError):
    pass


class NoTrainableStage(PipertError):
    pass


class EmptyTrainingSet(PipertError):
    pass


# compiler
class RuleNonTermination(PipertError):
    pass


# eval
class UnknownMetric(PipertError):
    pass


class ThreadingError(PipertError):
    pass


# dsl
class DslSyntaxError(PipertError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class UnboundName(PipertError):
    pass


class BadArity(PipertError):
    pass
