"""Exact rational-number plumbing shared by the closed-form code paths.

Model coefficients and agent parameters are kept as `fractions.Fraction`
wherever the math is algebraic, so that closed-form strategies, best
responses and fixed-point residuals cancel exactly instead of differing by
a few ulps. Floats cross into numpy land through `as_float` exactly once.
"""

from __future__ import annotations

from decimal import Decimal
from fractions import Fraction
from numbers import Rational

Number = int | float | str | Decimal | Fraction


def exact(x: Number) -> Fraction:
    """Convert a scalar to an exact rational.

    Python floats are interpreted through their shortest decimal repr, so
    ``exact(0.2) == Fraction(1, 5)`` — the number the author wrote, not the
    nearest binary double. Strings and Decimals are taken literally.
    """
    if isinstance(x, bool):
        raise TypeError("bool is not a numeric coefficient")
    if isinstance(x, Rational):  # int, Fraction
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(Decimal(repr(x)))
    if isinstance(x, (str, Decimal)):
        return Fraction(Decimal(x))
    raise TypeError(f"cannot interpret {x!r} as an exact number")


def as_float(x) -> float:
    """Round an exact value to float64 (the single rational→float crossing)."""
    return float(x)


def exact_mean(values) -> Fraction:
    vals = list(values)
    if not vals:
        raise ValueError("mean of empty sequence")
    return sum((Fraction(v) for v in vals), Fraction(0)) / len(vals)
