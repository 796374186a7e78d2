"""Exact arithmetic on the unit hash interval [0, 1).

Positions are dyadic fractions stored as 128-bit numerators over an implicit
denominator of 2**128. Node hashes only ever occupy the top 64 fraction bits,
which leaves 64 bits of headroom for de Bruijn targets ``(v + j) / 2**i`` with
``i <= 32`` to be computed without rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Tuple, TypeVar

FRACTION_BITS = 128
NODE_BITS = 64
SCALE = 1 << FRACTION_BITS
MASK64 = (1 << 64) - 1
MAX_LEVEL = 32

BitString = Tuple[int, ...]

# SplitMix64 finalizer (Steele, Lea & Flood 2014); public constants.
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class HashPoint(int):
    """A position in [0, 1), held as ``numerator / 2**128``.

    Subclasses ``int`` so comparisons and sorting run at native speed; the
    numerator is the int value itself.
    """

    __slots__ = ()

    def __new__(cls, numerator: int = 0) -> "HashPoint":
        if not 0 <= numerator < SCALE:
            raise ValueError(f"numerator {numerator} outside [0, 2**128)")
        return super().__new__(cls, numerator)

    @classmethod
    def from_fraction(cls, value) -> "HashPoint":
        """Build a point from an exact dyadic value (Fraction, int, or str)."""
        frac = Fraction(value)
        scaled = frac * SCALE
        if scaled.denominator != 1:
            raise ValueError(f"{value} is not representable with {FRACTION_BITS} bits")
        return cls(int(scaled))

    @property
    def fraction(self) -> Fraction:
        return Fraction(int(self), SCALE)

    def __float__(self) -> float:
        return int(self) / SCALE

    def __repr__(self) -> str:
        return f"HashPoint({float(self)!r})"


@dataclass(frozen=True)
class DigitString:
    base: int
    digits: Tuple[int, ...]

    def __post_init__(self):
        if not _is_power_of_two(self.base) or self.base < 2:
            raise ValueError(f"base must be a power of two >= 2, got {self.base}")
        if any(not 0 <= x < self.base for x in self.digits):
            raise ValueError(f"digit out of range for base {self.base}")


def _is_power_of_two(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def mix64(x: int) -> int:
    """SplitMix64 avalanche mix of a 64-bit integer."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def hash_id(node_id: int) -> HashPoint:
    """Map a node id to its position. Ids wider than 64 bits are truncated."""
    return HashPoint(mix64(node_id & MASK64) << (FRACTION_BITS - NODE_BITS))


def point_of_bits(bits: Sequence[int]) -> HashPoint:
    """Sum of ``bits[k] * 2**-(k+1)``, exactly."""
    if len(bits) > FRACTION_BITS:
        raise ValueError(f"bit string longer than {FRACTION_BITS} bits")
    acc = 0
    for b in bits:
        if b not in (0, 1):
            raise ValueError(f"not a bit: {b!r}")
        acc = (acc << 1) | b
    return HashPoint(acc << (FRACTION_BITS - len(bits)))


def bits_of_point(p: int, k: int) -> BitString:
    """The ``k`` most significant fraction bits of ``p``."""
    if not 0 <= k <= FRACTION_BITS:
        raise ValueError(f"k must lie in [0, {FRACTION_BITS}], got {k}")
    top = int(p) >> (FRACTION_BITS - k)
    return tuple((top >> (k - 1 - i)) & 1 for i in range(k))


def base_transform(bits: Sequence[int], q: int) -> DigitString:
    """Group bits into base-``q`` digits, zero-padding on the right."""
    if not _is_power_of_two(q) or q < 2:
        raise ValueError(f"q must be a power of two >= 2, got {q}")
    m = q.bit_length() - 1
    padded = list(bits) + [0] * (-len(bits) % m)
    digits = []
    for start in range(0, len(padded), m):
        d = 0
        for b in padded[start:start + m]:
            d = (d << 1) | b
        digits.append(d)
    return DigitString(q, tuple(digits))


def digits_to_bits(ds: DigitString) -> BitString:
    """Inverse of :func:`base_transform` (returns the padded bit string)."""
    m = ds.base.bit_length() - 1
    return tuple((d >> (m - 1 - i)) & 1 for d in ds.digits for i in range(m))


def distance(a: int, b: int, mode: str = "linear") -> Fraction:
    diff = abs(int(a) - int(b))
    if mode == "ring":
        diff = min(diff, SCALE - diff)
    elif mode != "linear":
        raise ValueError(f"unknown distance mode {mode!r}")
    return Fraction(diff, SCALE)


T = TypeVar("T")


def closest(candidates: Iterable[Tuple[int, T]], target: int) -> Tuple[int, T]:
    """Candidate ``(point, id)`` nearest to ``target`` on the line.

    Ties go to the smaller point, then the smaller id.
    """
    best = None
    best_key = None
    t = int(target)
    for point, ident in candidates:
        key = (abs(int(point) - t), int(point), ident)
        if best_key is None or key < best_key:
            best, best_key = (point, ident), key
    if best is None:
        raise ValueError("closest() needs at least one candidate")
    return best


def de_bruijn_target(v: int, i: int, j: int) -> HashPoint:
    """The point ``(v + j) / 2**i``.

    Exact whenever the low ``i`` bits of ``v``'s numerator are zero, which
    holds for every node hash and ``i <= 32``; otherwise those bits truncate.
    """
    if not 1 <= i <= MAX_LEVEL:
        raise ValueError(f"level must lie in [1, {MAX_LEVEL}], got {i}")
    if not 0 <= j < (1 << i):
        raise ValueError(f"j={j} outside [0, 2**{i})")
    return HashPoint((int(v) + j * SCALE) >> i)
