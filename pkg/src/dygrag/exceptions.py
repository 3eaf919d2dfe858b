from __future__ import annotations

from typing import Any, Final, Sequence


class DygragError(Exception):
    """Base class for errors raised by dygrag."""

    def __init__(self, *args: Any) -> None:
        super().__init__(args)

    @property
    def reason(self) -> str:
        raise NotImplementedError

    def message(self) -> str:
        return self.reason

    __str__ = message


class ShapeMismatchError(DygragError, ValueError):
    """Operands of a tensor primitive have incompatible shapes."""

    def __init__(
        self, operation: str, left: Sequence[int], right: Sequence[int]
    ) -> None:
        super().__init__(operation, left, right)
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right)

    @property
    def reason(self) -> str:
        return f"{self.operation}: incompatible shapes {self.left} and {self.right}"


class NonScalarBackwardError(DygragError, ValueError):
    """Backward was started from a tensor that is not a scalar."""

    def __init__(self, shape: Sequence[int]) -> None:
        super().__init__(shape)
        self.shape = tuple(shape)

    @property
    def reason(self) -> str:
        return f"backward needs a scalar root, got shape {self.shape}"


class MissingGradientError(DygragError, RuntimeError):
    """An optimizer step found a registered parameter without a gradient."""

    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name

    @property
    def reason(self) -> str:
        return f"parameter {self.name!r} has no gradient"


class NonFiniteError(DygragError, ValueError):
    """A value that must be finite is not."""

    def __init__(self, what: str) -> None:
        super().__init__(what)
        self.what = what

    @property
    def reason(self) -> str:
        return f"non-finite value in {self.what}"


class CheckpointFormatError(DygragError, ValueError):
    """A checkpoint container cannot be decoded."""

    def __init__(self, problem: str) -> None:
        super().__init__(problem)
        self.problem = problem

    @property
    def reason(self) -> str:
        return f"bad checkpoint: {self.problem}"


class AllPositionsIgnoredError(DygragError, ValueError):
    """Cross entropy has no position left to average over."""

    reason: Final = "every target position is ignored; the mean loss is undefined"


class InvalidParameterError(DygragError, ValueError):
    """A parameter is outside its documented range."""

    def __init__(self, name: str, value: object, constraint: str) -> None:
        super().__init__(name, value, constraint)
        self.name = name
        self.value = value
        self.constraint = constraint

    @property
    def reason(self) -> str:
        return f"{self.name}={self.value!r}: must satisfy {self.constraint}"


class EdgeListParseError(DygragError, ValueError):
    """A line of an edge list is malformed."""

    def __init__(self, line_number: int, line: str, problem: str) -> None:
        super().__init__(line_number, line, problem)
        self.line_number = line_number
        self.line = line
        self.problem = problem

    @property
    def reason(self) -> str:
        return f"line {self.line_number}: {self.problem}: {self.line!r}"


class EmptyInputError(DygragError, ValueError):
    """An input that must hold data holds none."""

    def __init__(self, what: str) -> None:
        super().__init__(what)
        self.what = what

    @property
    def reason(self) -> str:
        return f"{self.what} is empty"


class DegenerateTimeRangeError(DygragError, ValueError):
    """All events share one timestamp, so steps cannot be formed."""

    def __init__(self, timestamp: float) -> None:
        super().__init__(timestamp)
        self.timestamp = timestamp

    @property
    def reason(self) -> str:
        return f"every event happens at t={self.timestamp!r}"


class EmptySplitWarning(UserWarning):
    """The validation or test part of a split holds no event."""


class UnknownTargetError(DygragError, LookupError):
    """The target node never appears in the graph."""

    def __init__(self, target: object) -> None:
        super().__init__(target)
        self.target = target

    @property
    def reason(self) -> str:
        return f"node {self.target!r} does not occur in the graph"


class UnknownTokenError(DygragError, LookupError):
    """A token string is not part of the vocabulary."""

    def __init__(self, token: str) -> None:
        super().__init__(token)
        self.token = token

    @property
    def reason(self) -> str:
        return f"token {self.token!r} is not in the vocabulary"


class SequenceTooLongError(DygragError, ValueError):
    """A sequence exceeds the model's positional capacity."""

    def __init__(self, length: int, limit: int) -> None:
        super().__init__(length, limit)
        self.length = length
        self.limit = limit

    @property
    def reason(self) -> str:
        return f"sequence of length {self.length} exceeds the limit of {self.limit}"


class TrainingDivergedError(DygragError, RuntimeError):
    """The training loss stopped being finite."""

    def __init__(self, stage: str, step: int) -> None:
        super().__init__(stage, step)
        self.stage = stage
        self.step = step

    @property
    def reason(self) -> str:
        return f"{self.stage}: loss diverged at step {self.step}"


class AugmentationError(DygragError, ValueError):
    """An augmentation would leave no maskable token behind."""

    def __init__(self, kind: str, portion: float, maskable: int) -> None:
        super().__init__(kind, portion, maskable)
        self.kind = kind
        self.portion = portion
        self.maskable = maskable

    @property
    def reason(self) -> str:
        return (
            f"{self.kind} with portion {self.portion} leaves no token "
            f"out of {self.maskable}"
        )


class NoPositivesError(DygragError, ValueError):
    """Too few annotated queries for in-batch contrastive training."""

    def __init__(self, queries: int = 0) -> None:
        super().__init__(queries)
        self.queries = queries

    @property
    def reason(self) -> str:
        return (
            f"the annotation has {self.queries} query(ies) with a positive pair,"
            " training needs at least 2"
        )


class EmptyCandidatePoolError(DygragError, LookupError):
    """No candidate is left to rank."""

    def __init__(self, query_id: str) -> None:
        super().__init__(query_id)
        self.query_id = query_id

    @property
    def reason(self) -> str:
        return f"no candidate left to rank for query {self.query_id!r}"


class EmptyDemonstrationsError(DygragError, ValueError):
    """A summary graph was requested from zero demonstrations."""

    reason: Final = "at least one demonstration is needed"


class MisalignedQueriesError(DygragError, KeyError):
    """Prediction and truth dumps disagree on their query ids."""

    def __init__(self, missing: Sequence[str], extra: Sequence[str]) -> None:
        super().__init__(missing, extra)
        self.missing = tuple(missing)
        self.extra = tuple(extra)

    @property
    def reason(self) -> str:
        return (
            f"queries without prediction: {list(self.missing)!r}; "
            f"predictions without truth: {list(self.extra)!r}"
        )


class ConfigError(DygragError, ValueError):
    """A configuration key or value is invalid."""

    def __init__(self, key: str, problem: str) -> None:
        super().__init__(key, problem)
        self.key = key
        self.problem = problem

    @property
    def reason(self) -> str:
        return f"{self.key}: {self.problem}"


class MissingPrerequisiteError(DygragError, RuntimeError):
    """A stage ran before the stage that produces its inputs."""

    def __init__(self, stage: str, prerequisite: str) -> None:
        super().__init__(stage, prerequisite)
        self.stage = stage
        self.prerequisite = prerequisite

    @property
    def reason(self) -> str:
        return (
            f"stage {self.stage!r} needs the artifacts of {self.prerequisite!r}; "
            f"run {self.prerequisite!r} first"
        )
