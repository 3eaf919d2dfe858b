from __future__ import annotations

import pytest

from dygrag.exceptions import (
    AllPositionsIgnoredError,
    ConfigError,
    DygragError,
    EdgeListParseError,
    InvalidParameterError,
    MisalignedQueriesError,
    MissingPrerequisiteError,
    SequenceTooLongError,
)


def test_InvalidParameterError_message() -> None:
    exc = InvalidParameterError("temperature", 0.0, "temperature > 0")
    assert str(exc) == "temperature=0.0: must satisfy temperature > 0"
    assert isinstance(exc, ValueError)


def test_EdgeListParseError_message() -> None:
    exc = EdgeListParseError(3, "a b", "expected 3 fields")
    assert exc.message() == "line 3: expected 3 fields: 'a b'"


def test_SequenceTooLongError_message() -> None:
    exc = SequenceTooLongError(130, 128)
    assert exc.message() == "sequence of length 130 exceeds the limit of 128"


def test_MisalignedQueriesError_str() -> None:
    exc = MisalignedQueriesError(["a@1"], [])
    assert str(exc) == (
        "queries without prediction: ['a@1']; predictions without truth: []"
    )
    assert isinstance(exc, KeyError)


def test_MissingPrerequisiteError_message() -> None:
    exc = MissingPrerequisiteError("finetune", "retrieve")
    assert exc.message().endswith("run 'retrieve' first")


def test_constant_reason() -> None:
    assert "ignored" in AllPositionsIgnoredError().message()


@pytest.mark.parametrize(
    "exc",
    [ConfigError("fusion.k", "expected int"), SequenceTooLongError(2, 1)],
)
def test_common_base(exc: Exception) -> None:
    with pytest.raises(DygragError):
        raise exc
