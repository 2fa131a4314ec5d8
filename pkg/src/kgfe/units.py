"""Unit expressions: products of named units raised to rational powers.

A unit expression is written ``kilogram/metre^2`` or ``metre^(1/2)``.
``None`` stands for dimensionless / unknown.
"""

from __future__ import annotations

import re
from fractions import Fraction
from functools import lru_cache

_TOKEN = re.compile(r"^([A-Za-z_][\w.-]*)(?:\^(\(-?\d+/\d+\)|-?\d+))?$")


def parse_unit(expr: str | None) -> dict[str, Fraction]:
    if expr is None or expr in ("", "1"):
        return {}
    return dict(_parse(expr))


@lru_cache(maxsize=4096)
def _parse(expr: str) -> tuple[tuple[str, Fraction], ...]:
    parts = _split_top(expr)
    out: dict[str, Fraction] = {}
    for sign, tok in parts:
        if tok == "1":
            continue
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"malformed unit expression {expr!r}")
        name, power = m.group(1), m.group(2)
        p = Fraction(power.strip("()")) if power else Fraction(1)
        out[name] = out.get(name, Fraction(0)) + sign * p
    return tuple((k, v) for k, v in out.items() if v != 0)


def _split_top(expr: str) -> list[tuple[int, str]]:
    """Split on '*' and the single top-level '/' (not inside parentheses)."""
    parts, depth, buf, sign = [], 0, "", 1
    for ch in expr:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if depth == 0 and ch in "*/":
            parts.append((sign, buf))
            buf = ""
            if ch == "/":
                sign = -1
            continue
        buf += ch
    parts.append((sign, buf))
    return [(s, t.strip()) for s, t in parts if t.strip()]


def _fmt_power(name: str, p: Fraction) -> str:
    if p == 1:
        return name
    if p.denominator == 1:
        return f"{name}^{p.numerator}"
    return f"{name}^({p.numerator}/{p.denominator})"


def format_unit(powers: dict[str, Fraction]) -> str | None:
    pos = sorted((k, v) for k, v in powers.items() if v > 0)
    neg = sorted((k, -v) for k, v in powers.items() if v < 0)
    if not pos and not neg:
        return None
    num = "*".join(_fmt_power(k, v) for k, v in pos) or "1"
    if not neg:
        return num
    return num + "/" + "*".join(_fmt_power(k, v) for k, v in neg)


@lru_cache(maxsize=4096)
def multiply(a: str | None, b: str | None, power_b: int = 1) -> str | None:
    pa, pb = parse_unit(a), parse_unit(b)
    out = dict(pa)
    for k, v in pb.items():
        out[k] = out.get(k, Fraction(0)) + power_b * v
    return format_unit({k: v for k, v in out.items() if v != 0})


@lru_cache(maxsize=4096)
def power(a: str | None, p: Fraction | int) -> str | None:
    return format_unit({k: v * Fraction(p) for k, v in parse_unit(a).items()})


@lru_cache(maxsize=4096)
def normalize(a: str | None) -> str | None:
    return format_unit(parse_unit(a))


def units_differ(units) -> bool:
    """True when at least two operands carry known, different units."""
    known = {normalize(u) for u in set(units) if u is not None}
    known.discard(None)
    return len(known) > 1
