from __future__ import annotations

import hashlib
import math
import re
from typing import Iterable, Iterator, Sequence, TypeVar

T = TypeVar("T")

_NEEDS_ESCAPE = re.compile(r"[\\:,\s]")


def quote_field(s: str) -> str:
    """Escape a value for a ``key: value,value`` line.

    Backslash, colon, comma and whitespace are backslash-escaped; whitespace
    is written as its ``\\xNN`` code so that lines stay single-line.
    """
    if not _NEEDS_ESCAPE.search(s):
        return s

    def escape(m: re.Match[str]) -> str:
        ch = m.group(0)
        if ch.isspace():
            return f"\\x{ord(ch):02x}"
        return "\\" + ch

    return _NEEDS_ESCAPE.sub(escape, s)


def unquote_field(s: str) -> str:
    return re.sub(
        r"\\(x[0-9a-f]{2}|.)",
        lambda m: chr(int(m.group(1)[1:], 16)) if len(m.group(1)) == 3 else m.group(1),
        s,
    )


def _split_unescaped(s: str, sep: str) -> list[str]:
    parts: list[str] = []
    current: list[str] = []
    chars = iter(s)
    for ch in chars:
        if ch == "\\":
            current.append(ch)
            current.append(next(chars, ""))
        elif ch == sep:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def format_mapping_line(key: str, values: Iterable[str]) -> str:
    """Render ``key: v1,v2,...``."""
    return f"{quote_field(key)}: " + ",".join(values)


def parse_mapping_line(line: str) -> tuple[str, list[str]]:
    """Inverse of :func:`format_mapping_line`; values are returned still quoted."""
    head, *rest = _split_unescaped(line.rstrip("\n"), ":")
    if not rest:
        msg = f"missing ':' in {line!r}"
        raise ValueError(msg)
    body = ":".join(rest).strip()
    values = [v.strip() for v in _split_unescaped(body, ",")] if body else []
    return unquote_field(head.strip()), values


def checksum(items: Iterable[tuple[str, object]]) -> str:
    """Stable digest of ``(key, value)`` pairs, independent of their order."""
    h = hashlib.md5()
    for key, value in sorted(items, key=lambda kv: kv[0]):
        h.update(f"{key}\0{value!r}\0".encode())
    return h.hexdigest()[:12]


def chunked(items: Sequence[T], size: int) -> Iterator[Sequence[T]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def round_half_up(x: float) -> int:
    # builtin round() rounds halves to even
    return int(math.floor(x + 0.5))
