"""Closed real intervals with outward-rounded endpoints.

Directed rounding modes are not portably reachable from Python, so every
computed endpoint is pushed outward by ``SLACK_ULPS`` units in the last place.
Elementary functions are evaluated with the platform libm at the endpoints and
get an extra ``ELEM_ULPS`` of slack on top of that.
"""

from __future__ import annotations

import math
import numbers
from typing import Iterable, Union

SLACK_ULPS = 4
ELEM_ULPS = 2

Real = Union[int, float]


class DivisionByZeroInterval(ZeroDivisionError):
    pass


class TanPoleInRange(ValueError):
    pass


def down(x: float, ulps: int = SLACK_ULPS) -> float:
    if x == 0.0:
        return -ulps * 5e-324
    return x - ulps * math.ulp(x)


def up(x: float, ulps: int = SLACK_ULPS) -> float:
    if x == 0.0:
        return ulps * 5e-324
    return x + ulps * math.ulp(x)


def _check_finite(lo: float, hi: float) -> None:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise OverflowError(f"interval endpoint overflow: [{lo}, {hi}]")


class _Empty:
    """Result of intersecting disjoint intervals."""

    __slots__ = ()
    is_empty = True

    def __repr__(self) -> str:
        return "EMPTY"

    def __bool__(self) -> bool:
        return False


EMPTY = _Empty()


def _binop(method):
    """Defer to the other operand's reflected method for non-numeric types."""

    def wrapper(self, other):
        if not isinstance(other, (Interval, int, float, numbers.Real)):
            return NotImplemented
        return method(self, other)

    wrapper.__name__ = method.__name__
    wrapper.__doc__ = method.__doc__
    return wrapper


class Interval:
    __slots__ = ("lo", "hi")
    is_empty = False

    def __init__(self, lo: Real, hi: Real | None = None):
        lo = float(lo)
        hi = lo if hi is None else float(hi)
        if not lo <= hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        _check_finite(lo, hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, name, value):
        raise AttributeError("Interval is immutable")

    @classmethod
    def _outward(cls, lo: float, hi: float, ulps: int = SLACK_ULPS) -> "Interval":
        return cls(down(lo, ulps), up(hi, ulps))

    @staticmethod
    def coerce(x: "Interval | Real") -> "Interval":
        return x if isinstance(x, Interval) else Interval(x)

    # -- basic properties -------------------------------------------------

    @property
    def width(self) -> float:
        return up(self.hi - self.lo, 1) if self.hi > self.lo else 0.0

    @property
    def mid(self) -> float:
        return 0.5 * self.lo + 0.5 * self.hi

    @property
    def rad(self) -> float:
        m = self.mid
        return max(up(self.hi - m, 1), up(m - self.lo, 1))

    @property
    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def contains(self, x: "Interval | Real") -> bool:
        if isinstance(x, Interval):
            return self.lo <= x.lo and x.hi <= self.hi
        return self.lo <= x <= self.hi

    __contains__ = contains

    def hull(self, other: "Interval | Real") -> "Interval":
        o = Interval.coerce(other)
        return Interval(min(self.lo, o.lo), max(self.hi, o.hi))

    def intersect(self, other: "Interval | Real"):
        o = Interval.coerce(other)
        lo, hi = max(self.lo, o.lo), min(self.hi, o.hi)
        if lo > hi:
            return EMPTY
        return Interval(lo, hi)

    def split(self) -> tuple["Interval", "Interval"]:
        m = self.mid
        return Interval(self.lo, m), Interval(m, self.hi)

    def widen(self, r: float) -> "Interval":
        return Interval._outward(self.lo - r, self.hi + r)

    # -- arithmetic --------------------------------------------------------

    @_binop
    def __add__(self, other):
        o = Interval.coerce(other)
        return Interval._outward(self.lo + o.lo, self.hi + o.hi)

    __radd__ = __add__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __pos__(self):
        return self

    @_binop
    def __sub__(self, other):
        o = Interval.coerce(other)
        return Interval._outward(self.lo - o.hi, self.hi - o.lo)

    @_binop
    def __rsub__(self, other):
        return Interval.coerce(other) - self

    @_binop
    def __mul__(self, other):
        o = Interval.coerce(other)
        ps = (self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi)
        return Interval._outward(min(ps), max(ps))

    __rmul__ = __mul__

    def reciprocal(self) -> "Interval":
        if self.lo <= 0.0 <= self.hi:
            raise DivisionByZeroInterval(f"division by interval containing 0: {self}")
        return Interval._outward(1.0 / self.hi, 1.0 / self.lo)

    @_binop
    def __truediv__(self, other):
        o = Interval.coerce(other)
        if o.lo <= 0.0 <= o.hi:
            raise DivisionByZeroInterval(f"division by interval containing 0: {o}")
        qs = (self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi)
        return Interval._outward(min(qs), max(qs))

    @_binop
    def __rtruediv__(self, other):
        return Interval.coerce(other) / self

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        if n == 0:
            return Interval(1.0)
        if n == 1:
            return self
        a, b = self.lo ** n, self.hi ** n
        if n % 2 == 1:
            return Interval._outward(a, b)
        if self.lo >= 0.0:
            return Interval._outward(a, b)
        if self.hi <= 0.0:
            return Interval._outward(b, a)
        return Interval(0.0, up(max(a, b)))

    def sqr(self) -> "Interval":
        return self ** 2

    def abs(self) -> "Interval":
        if self.lo >= 0:
            return self
        if self.hi <= 0:
            return -self
        return Interval(0.0, self.mag)

    # -- elementary functions ---------------------------------------------

    def _mono(self, f) -> "Interval":
        return Interval._outward(f(self.lo), f(self.hi), SLACK_ULPS + ELEM_ULPS)

    def exp(self) -> "Interval":
        try:
            r = self._mono(math.exp)
        except OverflowError:
            raise OverflowError(f"exp overflow on {self}") from None
        return Interval(max(r.lo, 0.0), r.hi)

    def sigmoid(self) -> "Interval":
        r = self._mono(sigmoid)
        return Interval(max(r.lo, 0.0), min(r.hi, 1.0))

    def tanh(self) -> "Interval":
        r = self._mono(math.tanh)
        return Interval(max(r.lo, -1.0), min(r.hi, 1.0))

    def cos(self) -> "Interval":
        return _trig(self, math.cos, 0.0)

    def sin(self) -> "Interval":
        return _trig(self, math.sin, -0.5)

    def tan(self) -> "Interval":
        # poles at (k + 1/2) * pi
        k_lo = math.floor(self.lo / math.pi - 0.5)
        k_hi = math.floor(self.hi / math.pi - 0.5)
        near = abs(math.remainder(self.lo - math.pi / 2, math.pi)) < 1e-12 or \
            abs(math.remainder(self.hi - math.pi / 2, math.pi)) < 1e-12
        if k_lo != k_hi or near:
            raise TanPoleInRange(f"tan pole inside {self}")
        return self._mono(math.tan)

    def apply(self, name: str) -> "Interval":
        try:
            return getattr(self, name)()
        except AttributeError:
            raise ValueError(f"unknown elementary function {name!r}") from None

    # -- misc --------------------------------------------------------------

    def __eq__(self, other):
        return isinstance(other, Interval) and self.lo == other.lo and self.hi == other.hi

    def __hash__(self):
        return hash((self.lo, self.hi))

    def __repr__(self):
        return f"Interval({self.lo!r}, {self.hi!r})"

    def __str__(self):
        return f"[{self.lo:.9g}, {self.hi:.9g}]"

    def __iter__(self):
        yield self.lo
        yield self.hi


def _trig(a: Interval, f, phase: float) -> Interval:
    """Enclosure of cos (phase 0) or sin (phase -1/2) over ``a``.

    Extrema of cos(x + phase*pi) sit at integer multiples of pi; candidates
    that land within a hair of an endpoint are counted as inside.
    """
    if a.hi - a.lo >= 2 * math.pi:
        return Interval(-1.0, 1.0)
    vals = [f(a.lo), f(a.hi)]
    lo_k = a.lo / math.pi + phase
    hi_k = a.hi / math.pi + phase
    eps = 1e-12
    lo, hi = min(vals), max(vals)
    for k in range(math.floor(lo_k - eps), math.ceil(hi_k + eps) + 1):
        if lo_k - eps <= k <= hi_k + eps:
            if k % 2 == 0:
                hi = 1.0
            else:
                lo = -1.0
    r = Interval._outward(lo, hi, SLACK_ULPS + ELEM_ULPS)
    return Interval(max(r.lo, -1.0), min(r.hi, 1.0))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def hull(items: Iterable[Interval | Real]) -> Interval:
    it = iter(items)
    acc = Interval.coerce(next(it))
    for x in it:
        acc = acc.hull(x)
    return acc


def interval_arith(a: Interval, b: Interval, op: str) -> Interval:
    ops = {"add": a.__add__, "sub": a.__sub__, "mul": a.__mul__, "div": a.__truediv__}
    return ops[op](b)


def interval_elem(a: Interval, f: str) -> Interval:
    return a.apply(f)


# ---------------------------------------------------------------------------
# Vectorised endpoint arithmetic on (lo, hi) ndarray pairs.  Used by the
# Taylor-model core for batched remainders; same slack policy as Interval.
# ---------------------------------------------------------------------------

import numpy as _np  # noqa: E402


def ia_out(lo, hi, ulps: int = SLACK_ULPS):
    lo = _np.asarray(lo, dtype=float)
    hi = _np.asarray(hi, dtype=float)
    return lo - ulps * _np.abs(_np.spacing(lo)), hi + ulps * _np.abs(_np.spacing(hi))


def ia_add(alo, ahi, blo, bhi):
    return ia_out(_np.add(alo, blo), _np.add(ahi, bhi))


def ia_mul(alo, ahi, blo, bhi):
    p1 = _np.multiply(alo, blo)
    p2 = _np.multiply(alo, bhi)
    p3 = _np.multiply(ahi, blo)
    p4 = _np.multiply(ahi, bhi)
    lo = _np.minimum(_np.minimum(p1, p2), _np.minimum(p3, p4))
    hi = _np.maximum(_np.maximum(p1, p2), _np.maximum(p3, p4))
    return ia_out(lo, hi)


def ia_scale(c, lo, hi):
    a = _np.multiply(c, lo)
    b = _np.multiply(c, hi)
    return ia_out(_np.minimum(a, b), _np.maximum(a, b))


def ia_mag(lo, hi):
    return _np.maximum(_np.abs(lo), _np.abs(hi))
