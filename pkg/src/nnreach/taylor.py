"""Taylor models: polynomial over a normalized domain plus interval remainder.

Domain variables live on [-1, 1].  An optional distinguished time variable
lives on [0, 1] and stands for ``tau = h * s`` inside one integration step.
Coefficient arrays carry leading batch dimensions so that a whole layer of
neurons can be pushed through one vectorised operation; a scalar model has
batch shape ``()``.

Floating-point error of every coefficient operation is bounded a priori and
folded into the remainder, so models stay enclosures despite binary64 rounding.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .interval import Interval, ia_add, ia_mag, ia_mul, ia_out, ia_scale

U = 2.0 ** -52  # two units of roundoff; covers one rounded op with margin
MAX_ORDER = 8


class DomainMismatch(ValueError):
    pass


class Basis:
    """Monomials of total degree <= order, with product and calculus tables."""

    def __init__(self, nvars: int, order: int, time_var: int | None = None):
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order must be in 0..{MAX_ORDER}")
        self.nvars = nvars
        self.order = order
        self.time_var = time_var
        exps = [e for d in range(order + 1) for e in _exps_of_degree(nvars, d)]
        self.exps = np.array(exps, dtype=int).reshape(len(exps), nvars)
        self.M = len(exps)
        self.index = {e: i for i, e in enumerate(exps)}
        self.deg = self.exps.sum(axis=1)
        self.mono_lo = np.array([self._range_lo(e) for e in exps])
        self.mono_lo[0] = 1.0  # constant monomial is exactly 1

        pairs = list(itertools.product(range(self.M), repeat=2))
        keep = [(i, j) for i, j in pairs if self.deg[i] + self.deg[j] <= order]
        over = [(i, j) for i, j in pairs if self.deg[i] + self.deg[j] > order]
        self.pi = np.array([p[0] for p in keep], dtype=int)
        self.pj = np.array([p[1] for p in keep], dtype=int)
        pk = np.array([self.index[tuple(self.exps[i] + self.exps[j])] for i, j in keep], dtype=int)
        self.scatter = sp.csr_matrix(
            (np.ones(len(keep)), (np.arange(len(keep)), pk)), shape=(len(keep), self.M)
        )
        if self.scatter.shape[0] * self.M <= 400_000:
            self.scatter = self.scatter.toarray()
        self.oi = np.array([p[0] for p in over], dtype=int)
        self.oj = np.array([p[1] for p in over], dtype=int)
        self.o_lo = np.array(
            [self._range_lo(tuple(self.exps[i] + self.exps[j])) for i, j in over]
        )

        if time_var is not None:
            self._build_time_tables()

    def _range_lo(self, e) -> float:
        """Lower end of a monomial's range (its upper end is always 1)."""
        for v, k in enumerate(e):
            if v != self.time_var and k % 2 == 1:
                return -1.0
        return 0.0

    def _build_time_tables(self) -> None:
        t = self.time_var
        target, factor, over_lo = [], [], []
        collapse = []
        for e in map(tuple, self.exps):
            e2 = list(e)
            e2[t] += 1
            factor.append(1.0 / e2[t])
            if sum(e2) <= self.order:
                target.append(self.index[tuple(e2)])
                over_lo.append(np.nan)
            else:
                target.append(-1)
                over_lo.append(self._range_lo(tuple(e2)))
            e3 = list(e)
            e3[t] = 0
            collapse.append(self.index[tuple(e3)])
        self.t_target = np.array(target)
        self.t_factor = np.array(factor)
        self.t_over_lo = np.array(over_lo)
        self.t_keep = self.t_target >= 0
        self.t_collapse = np.zeros((self.M, self.M))
        self.t_collapse[np.arange(self.M), collapse] = 1.0
        self.t_shift = np.zeros((self.M, self.M))
        self.t_shift[np.arange(self.M)[self.t_keep], self.t_target[self.t_keep]] = 1.0
        self.t_free = self.exps[:, t] == 0

    def var_index(self, v: int) -> int:
        e = [0] * self.nvars
        e[v] = 1
        return self.index[tuple(e)]

    def __repr__(self):
        return f"Basis(nvars={self.nvars}, order={self.order}, time_var={self.time_var})"


def _exps_of_degree(n: int, d: int):
    if n == 0:
        if d == 0:
            yield ()
        return
    for first in range(d, -1, -1):
        for rest in _exps_of_degree(n - 1, d - first):
            yield (first,) + rest


@lru_cache(maxsize=None)
def get_basis(nvars: int, order: int, time_var: int | None = None) -> Basis:
    return Basis(nvars, order, time_var)


def _mk(basis: Basis, c, lo, hi) -> "TaylorModel":
    """Unchecked constructor used by the arithmetic internals."""
    tm = object.__new__(TaylorModel)
    shp = c.shape[:-1]
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != shp:
        lo = np.broadcast_to(lo, shp).copy()
    if hi.shape != shp:
        hi = np.broadcast_to(hi, shp).copy()
    tm.basis = basis
    tm.c = c
    tm.lo = lo
    tm.hi = hi
    return tm


def _poly_bound(basis: Basis, c: np.ndarray):
    """Coefficient-sum range bound of the polynomial part, per batch element."""
    lo_k = basis.mono_lo[1:]
    v = c[..., 1:]
    tlo = np.minimum(v * lo_k, v)
    thi = np.maximum(v * lo_k, v)
    err = (basis.M + 1) * U * np.abs(c).sum(axis=-1)
    lo = c[..., 0] + tlo.sum(axis=-1) - err
    hi = c[..., 0] + thi.sum(axis=-1) + err
    return ia_out(lo, hi)


class TaylorModel:
    """Polynomial (coefficients ``c`` over ``basis``) plus remainder [lo, hi]."""

    __slots__ = ("basis", "c", "lo", "hi")
    __array_priority__ = 100  # keep numpy scalars from hijacking operators

    def __init__(self, basis: Basis, c, lo=0.0, hi=0.0):
        c = np.asarray(c, dtype=float)
        if c.shape[-1] != basis.M:
            raise DomainMismatch(f"coefficient length {c.shape[-1]} != {basis.M}")
        self.basis = basis
        self.c = c
        shape = c.shape[:-1]
        self.lo = np.broadcast_to(np.asarray(lo, dtype=float), shape).copy()
        self.hi = np.broadcast_to(np.asarray(hi, dtype=float), shape).copy()
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise OverflowError("non-finite Taylor model")

    # -- constructors -------------------------------------------------------

    @classmethod
    def const(cls, basis: Basis, value, shape=()) -> "TaylorModel":
        c = np.zeros(tuple(shape) + (basis.M,))
        if isinstance(value, Interval):
            m = value.mid
            c[..., 0] = m
            lo, hi = ia_out(value.lo - m, value.hi - m)
            return cls(basis, c, lo, hi)
        c[..., 0] = value
        return cls(basis, c)

    @classmethod
    def variable(cls, basis: Basis, v: int, center: float = 0.0, radius: float = 1.0) -> "TaylorModel":
        """``center + radius * x_v``: the affine chart of one box side."""
        c = np.zeros(basis.M)
        c[0] = center
        if radius != 0.0:
            c[basis.var_index(v)] = radius
        err = U * (abs(center) + abs(radius))
        return cls(basis, c, -err, err)

    @classmethod
    def from_interval(cls, basis: Basis, iv: Interval, v: int | None) -> "TaylorModel":
        """Chart of ``iv`` along domain variable ``v`` (None: constant interval)."""
        if v is None or iv.hi == iv.lo:
            return cls.const(basis, iv if iv.hi > iv.lo else iv.lo)
        mid = iv.mid
        rad = max(iv.hi - mid, mid - iv.lo)
        return cls.variable(basis, v, mid, rad)

    @classmethod
    def stack(cls, tms) -> "TaylorModel":
        tms = list(tms)
        b = tms[0].basis
        return cls(b, np.stack([t.c for t in tms]), np.stack([t.lo for t in tms]), np.stack([t.hi for t in tms]))

    def __getitem__(self, idx) -> "TaylorModel":
        return _mk(self.basis, self.c[idx], self.lo[idx], self.hi[idx])

    def unstack(self) -> list["TaylorModel"]:
        return [self[i] for i in range(self.c.shape[0])]

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self):
        return self.c.shape[:-1]

    @property
    def order(self) -> int:
        return self.basis.order

    @property
    def n_vars(self) -> int:
        return self.basis.nvars

    @property
    def remainder(self) -> Interval:
        return Interval(float(self.lo), float(self.hi))

    def poly_dict(self, tol: float = 0.0) -> dict:
        return {tuple(int(k) for k in self.basis.exps[i]): float(self.c[i])
                for i in range(self.basis.M) if abs(self.c[i]) > tol}

    def bound_arrays(self):
        plo, phi = _poly_bound(self.basis, self.c)
        return ia_add(plo, phi, self.lo, self.hi)

    def bound(self) -> Interval:
        """Coefficient-sum enclosure of the range (scalar models)."""
        lo, hi = self.bound_arrays()
        return Interval(float(lo), float(hi))

    def bounds(self) -> list[Interval]:
        lo, hi = self.bound_arrays()
        return [Interval(a, b) for a, b in zip(np.ravel(lo), np.ravel(hi))]

    def range(self) -> Interval:
        """Tighter enclosure using monotonicity; falls back to ``bound``."""
        lo, hi = poly_range(self.basis, self.c)
        r = Interval(lo, hi) + self.remainder
        return r.intersect(self.bound()) or r

    def eval_poly(self, points) -> np.ndarray:
        """Polynomial part at domain points of shape (N, nvars)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        mons = np.prod(pts[:, None, :] ** self.basis.exps[None, :, :], axis=-1)
        return mons @ self.c.T

    def contains_value(self, point, value) -> bool:
        p = float(self.eval_poly([point])[0])
        slack = 1e-15 * (1 + abs(p))
        return self.lo - slack <= value - p <= self.hi + slack

    # -- arithmetic ---------------------------------------------------------

    def _check(self, o: "TaylorModel"):
        if o.basis is not self.basis:
            raise DomainMismatch(f"{self.basis} vs {o.basis}")

    def __add__(self, o):
        if isinstance(o, TaylorModel):
            self._check(o)
            c = self.c + o.c
            err = U * np.abs(c).sum(axis=-1)
            lo, hi = ia_add(self.lo, self.hi, o.lo, o.hi)
            return _mk(self.basis, c, *ia_out(lo - err, hi + err))
        if isinstance(o, Interval):
            m = o.mid
            r = self + m
            lo, hi = ia_add(r.lo, r.hi, o.lo - m, o.hi - m)
            return _mk(self.basis, r.c, lo, hi)
        o = np.asarray(o, dtype=float)
        c = self.c.copy()
        c[..., 0] = c[..., 0] + o
        err = U * np.abs(c[..., 0])
        return _mk(self.basis, c, *ia_out(self.lo - err, self.hi + err))

    __radd__ = __add__

    def __neg__(self):
        return _mk(self.basis, -self.c, -self.hi, -self.lo)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, TaylorModel):
            return self._mul_tm(o)
        if isinstance(o, Interval):
            m = o.mid
            r = self.scale(m)
            plo, phi = self.bound_arrays()
            dlo, dhi = ia_mul(plo, phi, o.lo - m, o.hi - m)
            lo, hi = ia_add(r.lo, r.hi, dlo, dhi)
            return _mk(self.basis, r.c, lo, hi)
        return self.scale(o)

    __rmul__ = __mul__

    def scale(self, k) -> "TaylorModel":
        k = np.asarray(k, dtype=float)
        c = self.c * k[..., None] if k.ndim else self.c * k
        err = U * np.abs(c).sum(axis=-1)
        lo, hi = ia_scale(k, self.lo, self.hi)
        return _mk(self.basis, c, *ia_out(lo - err, hi + err))

    def _mul_tm(self, o: "TaylorModel") -> "TaylorModel":
        self._check(o)
        b = self.basis
        a_c, b_c = np.broadcast_arrays(self.c, o.c)
        prods = a_c[..., b.pi] * b_c[..., b.pj]
        if isinstance(b.scatter, np.ndarray):
            c = prods @ b.scatter
        else:
            flat = prods.reshape(-1, prods.shape[-1])
            c = np.asarray(b.scatter.T @ flat.T).T.reshape(prods.shape[:-1] + (b.M,))
        over = a_c[..., b.oi] * b_c[..., b.oj]
        tlo = np.minimum(over * b.o_lo, over).sum(axis=-1)
        thi = np.maximum(over * b.o_lo, over).sum(axis=-1)
        err = (b.M + 2) * U * np.abs(a_c).sum(axis=-1) * np.abs(b_c).sum(axis=-1)
        # (Pa + Ra)(Pb + Rb) - Pa Pb = Pa Rb + Ra (Pb + Rb)
        alo, ahi = _poly_bound(b, self.c)
        blo, bhi = _poly_bound(b, o.c)
        x1 = ia_mul(alo, ahi, o.lo, o.hi)
        sb = ia_add(blo, bhi, o.lo, o.hi)
        x2 = ia_mul(self.lo, self.hi, *sb)
        lo, hi = ia_add(*x1, *x2)
        lo, hi = ia_add(lo, hi, tlo - err, thi + err)
        return _mk(b, c, lo, hi)

    def __truediv__(self, o):
        # only division by a constant (real, Interval, or constant model)
        if isinstance(o, TaylorModel):
            if np.any(o.c[..., 1:] != 0) or o.shape != ():
                raise NotImplementedError("Taylor-model division is not supported")
            lo, hi = o.bound_arrays()
            o = Interval(float(lo), float(hi))
        if isinstance(o, Interval):
            return self * o.reciprocal()
        if _exact_recip(o):
            return self.scale(1.0 / o)
        return self * Interval(float(o)).reciprocal()

    def __rtruediv__(self, o):
        raise NotImplementedError("Taylor-model division is not supported")

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("integer exponent >= 0 required")
        if n == 0:
            return TaylorModel.const(self.basis, 1.0, self.shape)
        result = None
        base = self
        while n:
            if n & 1:
                result = base if result is None else result * base
            n >>= 1
            if n:
                base = base * base
        return result

    # -- calculus -------------------------------------------------------------

    def apply(self, fn: str) -> "TaylorModel":
        return compose_elem(self, fn)

    def integrate_time(self, h: float = 1.0) -> "TaylorModel":
        """Antiderivative in the time variable (zero constant), scaled by ``h``."""
        b = self.basis
        if b.time_var is None:
            raise DomainMismatch("basis has no time variable")
        scaled = self.c * b.t_factor
        c = scaled @ b.t_shift
        over = scaled[..., ~b.t_keep]
        olo = b.t_over_lo[~b.t_keep]
        tlo = np.minimum(over * olo, over).sum(axis=-1)
        thi = np.maximum(over * olo, over).sum(axis=-1)
        # remainder of the integral over [0, s], s in [0, 1]
        rlo = np.minimum(self.lo, 0.0)
        rhi = np.maximum(self.hi, 0.0)
        lo, hi = ia_add(rlo, rhi, tlo, thi)
        err = 2 * U * np.abs(self.c).sum(axis=-1)
        out = _mk(b, c, *ia_out(lo - err, hi + err))
        return out.scale(h) if h != 1.0 else out

    def at_time(self, s: float = 1.0) -> "TaylorModel":
        """Substitute the time variable by ``s`` in [0, 1]."""
        b = self.basis
        if s == 1.0:
            w = self.c
        else:
            w = self.c * (s ** b.exps[:, b.time_var])
        c = w @ b.t_collapse
        err = (b.order + 2) * U * np.abs(w).sum(axis=-1)
        return _mk(b, c, *ia_out(self.lo - err, self.hi + err))

    def drop_remainder(self) -> "TaylorModel":
        return _mk(self.basis, self.c, 0.0, 0.0)

    def with_remainder(self, lo, hi) -> "TaylorModel":
        return _mk(self.basis, self.c, lo, hi)

    def __repr__(self):
        if self.shape == ():
            return f"TaylorModel({self.poly_dict(1e-300)}, rem={self.remainder})"
        return f"TaylorModel(batch={self.shape}, order={self.order})"


def _exact_recip(x: float) -> bool:
    m, _ = math.frexp(float(x))
    return abs(m) == 0.5


def tm_arith(a: TaylorModel, b, op: str) -> TaylorModel:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "scale":
        return a.scale(b)
    raise ValueError(op)


def tm_bound(a: TaylorModel) -> Interval:
    return a.bound()


def tm_integrate_time(a: TaylorModel, h: float = 1.0) -> TaylorModel:
    return a.integrate_time(h)


# ---------------------------------------------------------------------------
# Range bounding with a monotonicity test
# ---------------------------------------------------------------------------


def poly_range(basis: Basis, c: np.ndarray) -> tuple[float, float]:
    """Enclose the range of one polynomial over the domain.

    Each variable whose partial derivative has constant sign is pinned to the
    endpoint that extremises the polynomial; what remains is bounded by the
    coefficient sum.  Exact at the corner when every variable is monotone.
    """
    lo = _extreme(basis, np.array(c, dtype=float), -1)
    hi = _extreme(basis, np.array(c, dtype=float), +1)
    return lo, hi


def _var_domain(basis: Basis, v: int) -> tuple[float, float]:
    return (0.0, 1.0) if v == basis.time_var else (-1.0, 1.0)


def _extreme(basis: Basis, c: np.ndarray, sense: int) -> float:
    free = [v for v in range(basis.nvars) if np.any(c[basis.exps[:, v] > 0] != 0)]
    err = 0.0
    changed = True
    while changed and free:
        changed = False
        for v in list(free):
            dlo, dhi = _poly_bound(basis, _derivative(basis, c, v))
            if dlo >= 0 or dhi <= 0:
                increasing = dlo >= 0
                a, b = _var_domain(basis, v)
                point = b if (increasing == (sense > 0)) else a
                err += (basis.M + 2) * U * float(np.abs(c).sum())
                c = _substitute(basis, c, v, point)
                free.remove(v)
                changed = True
    lo, hi = _poly_bound(basis, c)
    return float(lo) - err if sense < 0 else float(hi) + err


def _derivative(basis: Basis, c: np.ndarray, v: int) -> np.ndarray:
    out = np.zeros(basis.M)
    e = basis.exps
    for i in np.nonzero((e[:, v] > 0) & (c != 0))[0]:
        e2 = e[i].copy()
        e2[v] -= 1
        out[basis.index[tuple(e2)]] += c[i] * e[i, v]
    return out


def _substitute(basis: Basis, c: np.ndarray, v: int, value: float) -> np.ndarray:
    out = np.zeros(basis.M)
    e = basis.exps
    for i in np.nonzero(c)[0]:
        e2 = e[i].copy()
        k = e2[v]
        e2[v] = 0
        out[basis.index[tuple(e2)]] += c[i] * value ** k
    return out


# ---------------------------------------------------------------------------
# Elementary-function composition
# ---------------------------------------------------------------------------


def _poly_derivs(kind: str, n: int) -> list[list[int]]:
    """Integer coefficient lists (ascending) of P_k with f^(k) = P_k(f)."""
    if kind == "sigmoid":
        mult = [0, 1, -1]  # s (1 - s)
    else:
        mult = [1, 0, -1]  # 1 - s^2
    polys = [[0, 1]]
    for _ in range(n):
        p = polys[-1]
        dp = [k * p[k] for k in range(1, len(p))] or [0]
        out = [0] * (len(dp) + len(mult) - 1)
        for i, a in enumerate(dp):
            for j, b in enumerate(mult):
                out[i + j] += a * b
        polys.append(out)
    return polys


_TM_FUNCS = ("sigmoid", "tanh", "exp", "cos", "sin")
_SIG_POLYS = _poly_derivs("sigmoid", MAX_ORDER + 2)
_TANH_POLYS = _poly_derivs("tanh", MAX_ORDER + 2)


def _ipoly(coeffs: list[int], s: Interval) -> Interval:
    acc = Interval(float(coeffs[-1]))
    for a in reversed(coeffs[:-1]):
        acc = acc * s + float(a)
    return acc


def _deriv_coeffs(coeffs: list[int]) -> list[int]:
    return [k * coeffs[k] for k in range(1, len(coeffs))] or [0]


def _prange(coeffs: list[int], s: Interval, depth: int = 14) -> Interval:
    """Range of an integer polynomial over ``s``.

    Pieces on which the derivative is sign-definite are bounded by their
    endpoint values; the rest are bisected, falling back to naive Horner
    evaluation on pieces that are already tiny.
    """
    d = _ipoly(_deriv_coeffs(coeffs), s)
    if d.lo >= 0 or d.hi <= 0 or s.lo == s.hi:
        return _ipoly(coeffs, Interval(s.lo)).hull(_ipoly(coeffs, Interval(s.hi)))
    if depth == 0:
        return _ipoly(coeffs, s)
    a, b = s.split()
    return _prange(coeffs, a, depth - 1).hull(_prange(coeffs, b, depth - 1))


def derivative_enclosure(fn: str, k: int, x: Interval) -> Interval:
    """Enclosure of the k-th derivative of ``fn`` over ``x``."""
    if fn == "sigmoid":
        return _prange(_SIG_POLYS[k], x.sigmoid())
    if fn == "tanh":
        return _prange(_TANH_POLYS[k], x.tanh())
    if fn == "exp":
        return x.exp()
    if fn == "cos":
        r = k % 4
        return [x.cos(), -x.sin(), -x.cos(), x.sin()][r]
    if fn == "sin":
        r = k % 4
        return [x.sin(), x.cos(), -x.sin(), -x.cos()][r]
    raise ValueError(f"Taylor-model composition with {fn!r} is not supported")


def compose_elem(a: TaylorModel, fn: str) -> TaylorModel:
    """Enclosure of ``fn`` composed with ``a``.

    Expands ``fn`` around the midpoint of a's range to the model order and
    adds the Lagrange remainder over the full range.
    """
    b = a.basis
    K = b.order
    lo, hi = a.bound_arrays()
    flat_lo = np.ravel(lo)
    flat_hi = np.ravel(hi)
    n = flat_lo.size
    # interval image of the range, used as a fallback and as a cap
    img = [Interval(flat_lo[i], flat_hi[i]).apply(fn) for i in range(n)]
    img_lo = np.array([v.lo for v in img]).reshape(a.shape)
    img_hi = np.array([v.hi for v in img]).reshape(a.shape)
    if fn not in _TM_FUNCS:
        if np.any(a.c[..., 1:] != 0):
            raise ValueError(f"Taylor-model composition with {fn!r} needs a constant argument")
        return _const_from_arrays(b, img_lo, img_hi)
    coef_mid = np.zeros((n, K + 1))
    coef_lo = np.zeros((n, K + 1))
    coef_hi = np.zeros((n, K + 1))
    lag_lo = np.zeros(n)
    lag_hi = np.zeros(n)
    const_lo = np.zeros(n)
    const_hi = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    centers = np.zeros(n)
    fact = [float(math.factorial(k)) for k in range(K + 2)]
    for i in range(n):
        rng = Interval(flat_lo[i], flat_hi[i])
        if rng.lo == rng.hi:
            v = Interval(rng.lo).apply(fn)
            degenerate[i] = True
            const_lo[i], const_hi[i] = v.lo, v.hi
            continue
        cpt = rng.mid
        centers[i] = cpt
        cp = Interval(cpt)
        for k in range(K + 1):
            d = derivative_enclosure(fn, k, cp) / fact[k]
            coef_mid[i, k] = d.mid
            coef_lo[i, k] = d.lo - d.mid
            coef_hi[i, k] = d.hi - d.mid
        dr = rng - cpt
        lag = derivative_enclosure(fn, K + 1, rng) / fact[K + 1] * dr ** (K + 1)
        lag_lo[i], lag_hi[i] = lag.lo, lag.hi
    shape = a.shape
    rs = lambda x: x.reshape(shape)  # noqa: E731
    delta = a - rs(centers)
    res = TaylorModel.const(b, 0.0, shape)
    res = res + rs(coef_mid[:, K])
    res = res.with_remainder(*ia_add(res.lo, res.hi, rs(coef_lo[:, K]), rs(coef_hi[:, K])))
    for k in range(K - 1, -1, -1):
        res = res * delta
        res = res + rs(coef_mid[:, k])
        res = res.with_remainder(*ia_add(res.lo, res.hi, rs(coef_lo[:, k]), rs(coef_hi[:, k])))
    lo2, hi2 = ia_add(res.lo, res.hi, rs(lag_lo), rs(lag_hi))
    c = res.c
    if degenerate.any():
        dg = rs(degenerate)
        c = np.where(dg[..., None], 0.0, c)
        mid = 0.5 * (rs(const_lo) + rs(const_hi))
        c[..., 0] = np.where(dg, mid, c[..., 0])
        lo2 = np.where(dg, rs(const_lo) - mid, lo2)
        hi2 = np.where(dg, rs(const_hi) - mid, hi2)
        lo2, hi2 = ia_out(lo2, hi2)
    out = TaylorModel(b, c, lo2, hi2)
    loose = (out.hi - out.lo) > (img_hi - img_lo)
    if np.any(loose):
        cap = _const_from_arrays(b, img_lo, img_hi)
        out = TaylorModel(
            b,
            np.where(loose[..., None], cap.c, out.c),
            np.where(loose, cap.lo, out.lo),
            np.where(loose, cap.hi, out.hi),
        )
    return out


def _const_from_arrays(b: Basis, lo, hi) -> TaylorModel:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mid = 0.5 * lo + 0.5 * hi
    c = np.zeros(lo.shape + (b.M,))
    c[..., 0] = mid
    return TaylorModel(b, c, *ia_out(lo - mid, hi - mid))


def tm_compose_elem(a: TaylorModel, fn: str) -> TaylorModel:
    return compose_elem(a, fn)


def remainder_width(a: TaylorModel) -> np.ndarray:
    return a.hi - a.lo


def magnitude(a: TaylorModel) -> np.ndarray:
    lo, hi = a.bound_arrays()
    return ia_mag(lo, hi)
