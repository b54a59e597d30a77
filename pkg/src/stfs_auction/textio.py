"""Line-oriented record format shared by outcomes, traces and STFS states.

One record per line: a tag followed by space-separated ``key=value`` fields.
Values never contain raw spaces (they are percent-encoded), lists are
comma-separated, ``-`` denotes an empty list or missing value, and floats use
``repr`` so that a dump/parse round-trip is exact.
"""

from __future__ import annotations

from urllib.parse import quote, unquote

import numpy as np

EMPTY = "-"
_SAFE = ",:;.+-_()[]"


def fmt_float(x) -> str:
    return repr(float(x))


def fmt_complex(z) -> str:
    z = complex(z)
    return f"{z.real!r}{'+' if z.imag >= 0 or np.isnan(z.imag) else '-'}{abs(z.imag)!r}j"


def fmt_list(xs, fmt=str) -> str:
    items = [fmt(x) for x in xs]
    return ",".join(items) if items else EMPTY


def fmt_pairs(pairs) -> str:
    return fmt_list(pairs, lambda p: f"{int(p[0])}:{int(p[1])}")


def format_record(tag: str, **fields) -> str:
    parts = [tag]
    for key, value in fields.items():
        text = EMPTY if value is None else str(value)
        parts.append(f"{key}={quote(text, safe=_SAFE)}")
    return " ".join(parts)


def parse_record(line: str):
    tag, *rest = line.split()
    fields = {}
    for item in rest:
        key, _, value = item.partition("=")
        fields[key] = unquote(value)
    return tag, fields


def parse_records(text: str):
    return [parse_record(ln) for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def parse_floats(s: str) -> np.ndarray:
    return np.array([], dtype=float) if s == EMPTY else np.array([float(x) for x in s.split(",")])


def parse_ints(s: str) -> list:
    return [] if s == EMPTY else [int(x) for x in s.split(",")]


def parse_complex_list(s: str) -> np.ndarray:
    return np.array([], dtype=complex) if s == EMPTY else np.array([complex(x) for x in s.split(",")])


def parse_pairs(s: str) -> list:
    if s == EMPTY:
        return []
    return [tuple(int(v) for v in item.split(":")) for item in s.split(",")]


def parse_optional(s: str):
    return None if s == EMPTY else s
