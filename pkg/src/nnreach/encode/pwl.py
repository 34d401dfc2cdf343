"""Piecewise-linear sandwiches of sigmoid-shaped activations.

Both sigmoid and tanh are convex left of 0 and concave right of 0.  On a
piece inside one region the chord bounds from one side and the midpoint
tangent from the other.  A piece straddling 0 gets the steepest line through
its left end that stays above the curve (tangent on the concave side, or the
chord), and symmetrically the line through its right end for the lower side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from ..interval import Interval
from ..neural import UnsupportedActivation

# intercept slack that absorbs rounding in the line construction
_SLACK = 1e-12


def _fns(activation: str):
    if activation == "sigmoid":
        f = lambda x: 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))
        df = lambda x: f(x) * (1.0 - f(x))
    elif activation == "tanh":
        f = lambda x: np.tanh(np.asarray(x, dtype=float))
        df = lambda x: 1.0 - np.tanh(np.asarray(x, dtype=float)) ** 2
    else:
        raise UnsupportedActivation(f"no sandwich for activation {activation!r}")
    return f, df


def _line_through(x0, y0, k):
    return k, y0 - k * x0


def _straddle_upper(f, df, a, b):
    fa = float(f(a))
    phi = lambda t: float(df(t)) * (t - a) - (float(f(t)) - fa)
    if phi(b) >= 0:
        t = b
    else:
        t = brentq(phi, 0.0, b, xtol=1e-15)
    k = (float(f(t)) - fa) / (t - a)
    return _line_through(a, fa, k)


def _straddle_lower(f, df, a, b):
    fb = float(f(b))
    psi = lambda t: float(df(t)) * (b - t) - (fb - float(f(t)))
    if psi(a) >= 0:
        t = a
    else:
        t = brentq(psi, a, 0.0, xtol=1e-15)
    k = (fb - float(f(t))) / (b - t)
    return _line_through(b, fb, k)


@dataclass
class PwlSandwich:
    activation: str
    domain: Interval
    breakpoints: np.ndarray
    # lower[k] = (slope, intercept) on [breakpoints[k], breakpoints[k+1]]
    lower: np.ndarray
    upper: np.ndarray
    max_gap: float

    @property
    def n_pieces(self) -> int:
        return len(self.breakpoints) - 1

    def piece(self, x):
        k = np.searchsorted(self.breakpoints, x, side="right") - 1
        return np.clip(k, 0, self.n_pieces - 1)

    def lower_at(self, x):
        k = self.piece(x)
        return self.lower[k, 0] * x + self.lower[k, 1]

    def upper_at(self, x):
        k = self.piece(x)
        return self.upper[k, 0] * x + self.upper[k, 1]

    def gap_on(self, grid):
        grid = np.asarray(grid, dtype=float)
        return float(np.max(self.upper_at(grid) - self.lower_at(grid)))


def pwl_sandwich(activation: str, domain, n_pieces: int, grid_points: int = 10_000) -> PwlSandwich:
    if n_pieces < 1:
        raise ValueError("n_pieces must be at least 1")
    domain = domain if isinstance(domain, Interval) else Interval(*domain)
    f, df = _fns(activation)
    lo, hi = domain.lo, domain.hi
    if hi == lo:
        # a point domain still needs one non-degenerate piece for the MILP rows
        hi = lo + 1e-9 * max(1.0, abs(lo))
    xs = np.linspace(lo, hi, n_pieces + 1)
    lower = np.empty((n_pieces, 2))
    upper = np.empty((n_pieces, 2))
    for k in range(n_pieces):
        a, b = float(xs[k]), float(xs[k + 1])
        fa, fb = float(f(a)), float(f(b))
        chord = _line_through(a, fa, (fb - fa) / (b - a))
        m = 0.5 * (a + b)
        tangent = _line_through(m, float(f(m)), float(df(m)))
        if b <= 0:
            lo_line, up_line = tangent, chord
        elif a >= 0:
            lo_line, up_line = chord, tangent
        else:
            lo_line, up_line = _straddle_lower(f, df, a, b), _straddle_upper(f, df, a, b)
        lower[k] = lo_line[0], lo_line[1] - _SLACK
        upper[k] = up_line[0], up_line[1] + _SLACK
    s = PwlSandwich(activation, Interval(lo, hi), xs, lower, upper, 0.0)
    grid = np.union1d(np.linspace(lo, hi, grid_points), xs)
    s.max_gap = s.gap_on(grid)
    return s


def activation_value(activation: str, x):
    return _fns(activation)[0](x)


def activation_range(activation: str, lo: float, hi: float) -> tuple[float, float]:
    """Outward-rounded image of [lo, hi] under a monotone activation."""
    f = _fns(activation)[0]
    flo, fhi = float(f(lo)), float(f(hi))
    eps = 4 * math.ulp(1.0)
    return flo - eps, fhi + eps
