from __future__ import annotations

import pytest

from dygrag.util import (
    checksum,
    chunked,
    format_mapping_line,
    parse_mapping_line,
    quote_field,
    round_half_up,
    unquote_field,
)


@pytest.mark.parametrize(
    "s, expected",
    [
        ("", ""),
        ("c0m1", "c0m1"),
        ("a:b", r"a\:b"),
        ("a,b", r"a\,b"),
        ("p q", r"p\x20q"),
        ("tab\there", r"tab\x09here"),
        ("back\\slash", r"back\\slash"),
    ],
)
def test_quote_field(s: str, expected: str) -> None:
    assert quote_field(s) == expected
    assert unquote_field(expected) == s


def test_mapping_line() -> None:
    line = format_mapping_line("odd:name@3", [quote_field("p q"), "r"])
    assert line == r"odd\:name@3: p\x20q,r"
    key, values = parse_mapping_line(line + "\n")
    assert key == "odd:name@3"
    assert [unquote_field(v) for v in values] == ["p q", "r"]


def test_mapping_line_without_values() -> None:
    assert parse_mapping_line("a@1: ") == ("a@1", [])


def test_mapping_line_without_colon() -> None:
    with pytest.raises(ValueError, match="missing ':'"):
        parse_mapping_line("a@1")


def test_checksum_ignores_order() -> None:
    items = [("fusion.k", "7"), ("seed", 0)]
    assert checksum(items) == checksum(reversed(items))
    assert checksum(items) != checksum([("fusion.k", "7"), ("seed", 1)])
    assert len(checksum(items)) == 12


def test_chunked() -> None:
    assert list(chunked([1, 2, 3, 4, 5], 2)) == [[1, 2], [3, 4], [5]]


@pytest.mark.parametrize(
    "x, expected", [(0.5, 1), (1.5, 2), (2.5, 3), (2.4, 2), (0.0, 0)]
)
def test_round_half_up(x: float, expected: int) -> None:
    assert round_half_up(x) == expected
