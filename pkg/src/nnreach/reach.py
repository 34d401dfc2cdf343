"""Validated flowpipes for controller automata and closed loops.

ODE modes are integrated with a Taylor series in time built from symbolic Lie
derivatives; the truncation remainder is validated by an inflate-and-check
Picard iteration.  Steps are powers of two so a unit dwell ends exactly at 1.

States are dicts of TaylorModels over one chart: each side of the initial box
with positive width gets a domain variable on [-1, 1], plus a time variable on
[0, 1] used only inside an integration step.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import expr as E
from .automaton import ClosedLoop, HybridAutomaton, Mode
from .interval import Interval, hull
from .neural import FLOW_TEMPLATES, PROXY_START, layer_activation
from .taylor import TaylorModel, _mk, get_basis

log = logging.getLogger("nnreach.reach")


class RemainderBlowup(ArithmeticError):
    pass


class BranchLimitExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ReachSettings:
    tm_order: int = 4
    ode_step: float = 0.1           # largest step; rounded down to a power of two
    picard_max_iter: int = 30
    remainder_inflation: float = 1.3
    max_branches: int = 256
    max_remainder_width: float = 1e2
    subdivision_depth: int = 0
    ode_tol: float = 1e-6           # target size of the last Taylor term per unit time
    min_step: float = 2.0 ** -16
    path: str = "ode"               # "ode" or "functional" for network layers
    merge_on_limit: bool = True     # past max_branches, continue with the action hull

    def __post_init__(self):
        if not 1 <= self.tm_order <= 8:
            raise ValueError("tm_order must be in 1..8")
        for name in ("ode_step", "picard_max_iter", "remainder_inflation", "max_branches",
                     "max_remainder_width", "ode_tol", "min_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.remainder_inflation <= 1:
            raise ValueError("remainder_inflation must exceed 1")
        if self.path not in ("ode", "functional"):
            raise ValueError("path must be 'ode' or 'functional'")


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------


class Chart:
    """Affine chart from [-1, 1]^n (plus time) onto an initial box."""

    def __init__(self, box: dict[str, Interval], order: int):
        self.box = {v: Interval.coerce(iv) for v, iv in box.items()}
        self.domain = [v for v, iv in self.box.items() if iv.hi > iv.lo]
        n = len(self.domain)
        self.basis = get_basis(n + 1, order, time_var=n)

    def initial_state(self) -> dict[str, TaylorModel]:
        out = {}
        for v, iv in self.box.items():
            k = self.domain.index(v) if v in self.domain else None
            out[v] = TaylorModel.from_interval(self.basis, iv, k)
        return out

    def to_domain(self, point: dict[str, float]) -> np.ndarray:
        """Domain coordinates (time 0) of a point of the box."""
        d = np.zeros(self.basis.nvars)
        for k, v in enumerate(self.domain):
            iv = self.box[v]
            d[k] = (point[v] - iv.mid) / (0.5 * (iv.hi - iv.lo))
        return np.clip(d, -1.0, 1.0)

    def const(self, value, shape=()) -> TaylorModel:
        return TaylorModel.const(self.basis, value, shape)


def _as_tm(x, basis, shape=()) -> TaylorModel:
    if isinstance(x, TaylorModel):
        return x
    if isinstance(x, Interval):
        return TaylorModel.const(basis, x, shape)
    return TaylorModel.const(basis, np.broadcast_to(np.asarray(x, dtype=float), shape), shape)


def bounds_of(state: dict[str, TaylorModel], tight: bool = True) -> dict[str, Interval]:
    out = {}
    for v, tm in state.items():
        if tm.shape != ():
            lo, hi = tm.bound_arrays()
            out[v] = Interval(float(np.min(lo)), float(np.max(hi)))
        else:
            out[v] = tm.range() if tight else tm.bound()
    return out


# ---------------------------------------------------------------------------
# ODE steps
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _time_power(basis, k: int) -> TaylorModel:
    c = np.zeros(basis.M)
    e = [0] * basis.nvars
    e[basis.time_var] = k
    c[basis.index[tuple(e)]] = 1.0
    return TaylorModel(basis, c)


def _is_zero(e: E.Expr) -> bool:
    return isinstance(e, E.Const) and e.value == 0.0


class OdeSystem:
    """Flows with the Taylor order used to integrate them."""

    def __init__(self, flows: dict[str, E.Expr], order: int):
        self.flows = dict(flows)
        self.order = order
        self.active = [v for v, f in flows.items() if not _is_zero(f)]

    @staticmethod
    @lru_cache(maxsize=None)
    def cached(items: tuple, order: int) -> "OdeSystem":
        return OdeSystem(dict(items), order)


def _tm_bound(x, basis, shape):
    if isinstance(x, TaylorModel):
        lo, hi = x.bound_arrays()
        return np.broadcast_to(lo, shape), np.broadcast_to(hi, shape)
    if isinstance(x, Interval):
        return np.full(shape, x.lo), np.full(shape, x.hi)
    a = np.broadcast_to(np.asarray(x, dtype=float), shape)
    return a, a


class _Poly:
    """Bare truncated polynomial used to build the Taylor series guess.

    No remainder is tracked: the series is validated afterwards by the
    Picard step, so it only needs to be accurate, not rigorous.
    """

    __slots__ = ("b", "c")
    __array_priority__ = 100

    def __init__(self, b, c):
        self.b = b
        self.c = c

    @staticmethod
    def lift(x, b, shape):
        if isinstance(x, _Poly):
            return x
        if isinstance(x, TaylorModel):
            return _Poly(b, x.c)
        if isinstance(x, Interval):
            x = x.mid
        c = np.zeros(tuple(shape) + (b.M,))
        c[..., 0] = x
        return _Poly(b, c)

    def _other(self, o):
        return o if isinstance(o, _Poly) else _Poly.lift(o, self.b, self.c.shape[:-1])

    def __add__(self, o):
        if isinstance(o, (int, float)):
            c = self.c.copy()
            c[..., 0] += o
            return _Poly(self.b, c)
        return _Poly(self.b, self.c + self._other(o).c)

    __radd__ = __add__

    def __neg__(self):
        return _Poly(self.b, -self.c)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return _Poly(self.b, self.c * o)
        o = self._other(o)
        b = self.b
        a_c, b_c = np.broadcast_arrays(self.c, o.c)
        prods = a_c[..., b.pi] * b_c[..., b.pj]
        if isinstance(b.scatter, np.ndarray):
            c = prods @ b.scatter
        else:
            flat = prods.reshape(-1, prods.shape[-1])
            c = np.asarray(b.scatter.T @ flat.T).T.reshape(prods.shape[:-1] + (b.M,))
        return _Poly(b, c)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, _Poly):
            if np.any(o.c[..., 1:] != 0):
                raise NotImplementedError("polynomial division is not supported")
            o = o.c[..., 0]
        if isinstance(o, Interval):
            o = o.mid
        o = np.asarray(o, dtype=float)
        return _Poly(self.b, self.c / (o[..., None] if o.ndim else o))

    def __pow__(self, n):
        out = _Poly.lift(1.0, self.b, self.c.shape[:-1])
        for _ in range(n):
            out = out * self
        return out

    def apply(self, fn):
        return _Poly(self.b, TaylorModel(self.b, self.c).apply(fn).c)

    def integrate_time(self):
        b = self.b
        return _Poly(b, (self.c * b.t_factor) @ b.t_shift)


def taylor_series(system: OdeSystem, state: dict[str, TaylorModel]):
    """Coefficients of the flow's Taylor polynomial in unscaled time.

    Computed by ``order`` rounds of ``x <- x0 + int f(x)`` on truncated
    polynomials; round ``k`` fixes the coefficient of ``t^k``.
    """
    any_tm = next(iter(state.values()))
    b, shape = any_tm.basis, any_tm.shape
    x0 = {v: _Poly.lift(x, b, shape) for v, x in state.items()}
    x = dict(x0)
    for _ in range(system.order):
        new = dict(x0)
        memo = {}
        for v in system.active:
            f = _Poly.lift(E.evaluate(system.flows[v], x, memo), b, shape)
            new[v] = x0[v] + f.integrate_time()
        x = new
    return {v: np.broadcast_to(x[v].c, tuple(shape) + (b.M,)) for v in system.active}


def _series_mag(system, series, basis) -> float:
    """Largest |coefficient of t^order| (the last kept Taylor term)."""
    top = basis.exps[:, basis.time_var] == system.order
    return max(float(np.max(np.abs(series[v][..., top]))) for v in system.active)


def _step_size(system, series, basis, settings, t, remaining, cap=math.inf) -> float:
    # last kept term a_K h^K below ode_tol
    K = system.order
    h = min(_pow2_floor(settings.ode_step), cap)
    mag = _series_mag(system, series, basis)
    if mag > 0:
        h_est = (settings.ode_tol / mag) ** (1.0 / K)
        if h_est < h:
            h = max(_pow2_floor(h_est), settings.min_step)
    h = min(h, _lowbit(t))
    if h > remaining:
        h = _pow2_floor(remaining) if remaining >= settings.min_step else remaining
    return h


def ode_flowpipe_step(system, state: dict[str, TaylorModel], h: float, settings: ReachSettings,
                      series=None):
    """One validated Taylor step of length ``h``.

    Returns ``(end_state, pipe)`` where ``pipe`` encloses the flow over the
    whole step with time normalised to [0, 1].  Raises RemainderBlowup if the
    Picard operator does not contract within ``picard_max_iter`` rounds.
    """
    if not isinstance(system, OdeSystem):
        system = OdeSystem(system, settings.tm_order)
    if not system.active:
        return dict(state), dict(state)
    any_tm = next(iter(state.values()))
    basis = any_tm.basis
    shape = any_tm.shape
    if series is None:
        series = taylor_series(system, state)
    hk = h ** basis.exps[:, basis.time_var]
    p = {v: _mk(basis, series[v] * hk, 0.0, 0.0) for v in system.active}

    def picard(R):
        X = dict(state)
        for v in system.active:
            X[v] = p[v].with_remainder(*R[v])
        memo = {}
        out = {}
        for v in system.active:
            f = _as_tm(E.evaluate(system.flows[v], X, memo), basis, shape)
            Q = state[v] + f.integrate_time(h)
            out[v] = (Q - p[v]).bound_arrays()
        return out

    zero = np.zeros(shape)
    R0 = picard({v: (zero, zero) for v in system.active})
    R = {}
    for v, (lo, hi) in R0.items():
        mag = np.maximum(np.abs(lo), np.abs(hi))
        eps = 1e-15 * (1.0 + mag)
        R[v] = (2.0 * np.minimum(lo, 0.0) - eps, 2.0 * np.maximum(hi, 0.0) + eps)
    f = settings.remainder_inflation
    for _ in range(settings.picard_max_iter):
        new = picard(R)
        if all(np.all(new[v][0] >= R[v][0]) and np.all(new[v][1] <= R[v][1]) for v in R):
            R = new
            # one more contraction round tightens the validated remainder
            R = picard(R)
            break
        for v in R:
            lo = np.minimum(R[v][0], new[v][0])
            hi = np.maximum(R[v][1], new[v][1])
            m = 0.5 * (lo + hi)
            R[v] = (m - f * (m - lo), m + f * (hi - m))
            if not np.all(np.isfinite(R[v][0]) & np.isfinite(R[v][1])):
                raise RemainderBlowup("non-finite remainder")
    else:
        raise RemainderBlowup(f"no Picard contraction in {settings.picard_max_iter} rounds (h={h})")
    pipe = dict(state)
    end = dict(state)
    for v in system.active:
        pipe[v] = p[v].with_remainder(*R[v])
        end[v] = pipe[v].at_time(1.0)
    return end, pipe


def _pow2_floor(x: float) -> float:
    return 2.0 ** math.floor(math.log2(x))


def _lowbit(t: float) -> float:
    """Largest power of two dividing the dyadic ``t`` (inf for 0)."""
    if t == 0.0:
        return math.inf
    m, e = math.frexp(t)
    k = 0
    while m != int(m):
        m *= 2
        k += 1
    m = int(m)
    while m % 2 == 0:
        m //= 2
        k -= 1
    return 2.0 ** (e - k)


def integrate(system, state: dict[str, TaylorModel], duration: float, settings: ReachSettings,
              record=None) -> dict[str, TaylorModel]:
    """Advance ``state`` by ``duration`` with adaptive power-of-two steps.

    The step is the largest power of two not exceeding ``ode_step`` for which
    the last Taylor term stays below ``ode_tol`` per unit time; a failed
    Picard validation halves it.  ``record(t0, h, pipe)`` sees every step.
    """
    if not isinstance(system, OdeSystem):
        system = OdeSystem(system, settings.tm_order)
    if not system.active or duration == 0.0:
        return dict(state)
    basis = next(iter(state.values())).basis
    t = 0.0
    while t < duration:
        series = taylor_series(system, state)
        h = _step_size(system, series, basis, settings, t, duration - t)
        while True:
            try:
                state_new, pipe = ode_flowpipe_step(system, state, h, settings, series)
                break
            except (RemainderBlowup, OverflowError):
                if h / 2 < settings.min_step:
                    raise RemainderBlowup(f"step below minimum at t={t}") from None
                h /= 2
        if record is not None:
            record(t, h, pipe)
        state = state_new
        t += h
    return state


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------


class LaneSystem(OdeSystem):
    """Scalar flow ``g' = f(g, c)`` with a constant parameter ``c``, batched.

    Keeps the partial derivatives of ``f`` for the mean-value propagation of
    incoming remainders in ``lane_integrate``.
    """

    def __init__(self, template: E.Expr, order: int):
        super().__init__({"g": template, "c": E.ZERO}, order)
        self.f_g = E.differentiate(template, "g")
        self.f_c = E.differentiate(template, "c")


@lru_cache(maxsize=None)
def _lane_system(activation: str, order: int) -> LaneSystem:
    return LaneSystem(FLOW_TEMPLATES[activation], order)


def _ia_exp(lo, hi):
    from .interval import ia_out
    return ia_out(np.exp(lo), np.exp(hi), 8)


def lane_integrate(system: LaneSystem, g: TaylorModel, c: TaylorModel, duration: float,
                   settings: ReachSettings, record=None) -> TaylorModel:
    """Integrate decoupled scalar lanes with mean-value remainder transport.

    Each step runs twice: once on the remainder-free polynomials and once
    on the full models (a sound but wrapped enclosure ``E``).  Steps are
    capped so that ``h * max|f_g| <= 1/2`` keeps the Picard operator
    contracting, and halved while the polynomial run's remainder per unit
    time exceeds ``ode_tol`` and shrinks faster than the step.  The remainder at the end of the step is the polynomial
    run's truncation remainder plus ``J_g * R_g + J_c * R_c``, where the sensitivities
    ``J_g = exp(int f_g)`` and ``J_c = int exp(...) f_c`` are bounded over
    ``E``; the result is intersected with the wrapped one.
    """
    basis = g.basis
    shape = g.shape
    c_poly = c.drop_remainder()
    Rc = (c.lo, c.hi)
    t = 0.0
    n_steps, h_min = 0, math.inf
    while t < duration:
        poly_state = {"g": g.drop_remainder(), "c": c_poly}
        series = taylor_series(system, poly_state)
        # keep the Picard operator contracting: h * max|f_g| <= 1/2
        fg_lo, fg_hi = _tm_bound(E.evaluate(system.f_g, {"g": g, "c": c}), basis, shape)
        lip = float(np.max(np.maximum(np.abs(fg_lo), np.abs(fg_hi))))
        cap = _pow2_floor(min(0.5 / lip, 1e300)) if lip > 0 else math.inf
        h = _step_size(system, series, basis, settings, t, duration - t, cap)
        prev_rate = math.inf
        while True:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    end_p, _ = ode_flowpipe_step(system, poly_state, h, settings, series)
                    # a posteriori: halve while the remainder per unit time exceeds
                    # ode_tol and halving pays off like time truncation (> 4x)
                    rate = float(np.max(end_p["g"].hi - end_p["g"].lo)) / h
                    if (rate > settings.ode_tol and rate < 0.25 * prev_rate
                            and h / 2 >= settings.min_step):
                        prev_rate = rate
                        h /= 2
                        continue
                    end_w, pipe_w = ode_flowpipe_step(system, {"g": g, "c": c}, h, settings, series)
                break
            except (RemainderBlowup, OverflowError):
                if h / 2 < settings.min_step:
                    raise RemainderBlowup(f"step below minimum at t={t}") from None
                h /= 2
        n_steps += 1
        h_min = min(h_min, h)
        with np.errstate(over="ignore", invalid="ignore"):
            lo, hi = _transport(system, pipe_w, end_p, g, c, Rc, h, basis, shape)
        e = end_w["g"]
        bad = ~(lo <= hi) | ~np.isfinite(lo) | ~np.isfinite(hi)
        lo = np.where(bad, e.lo, np.maximum(lo, e.lo))
        hi = np.where(bad, e.hi, np.minimum(hi, e.hi))
        bad = lo > hi  # cannot happen in exact arithmetic; keep the wrapped one
        lo = np.where(bad, e.lo, lo)
        hi = np.where(bad, e.hi, hi)
        g = e.with_remainder(lo, hi)
        if record is not None:
            record(t, h, pipe_w)
        t += h
    log.debug("lanes %s: %d steps, smallest %.3g", shape, n_steps, h_min)
    return g


def _transport(system, pipe_w, end_p, g, c, Rc, h, basis, shape):
    from .interval import ia_add, ia_mul
    env = {"g": pipe_w["g"], "c": c}
    fg_lo, fg_hi = _tm_bound(E.evaluate(system.f_g, env), basis, shape)
    fc_lo, fc_hi = _tm_bound(E.evaluate(system.f_c, env), basis, shape)
    jg = _ia_exp(*ia_mul(h, h, fg_lo, fg_hi))
    grow = (np.minimum(jg[0], 1.0), np.maximum(jg[1], 1.0))
    jc = ia_mul(*ia_mul(h, h, fc_lo, fc_hi), *grow)
    r = ia_add(end_p["g"].lo, end_p["g"].hi, *ia_mul(*jg, g.lo, g.hi))
    return ia_add(*r, *ia_mul(*jc, *Rc))


def proxy_reach(activation: str, c: TaylorModel, settings: ReachSettings,
                g0: TaylorModel | None = None) -> TaylorModel:
    """Proxy state at time 1 for pre-activations ``c`` (a batched model)."""
    basis = c.basis
    if g0 is None:
        g0 = TaylorModel.const(basis, PROXY_START[activation], c.shape)
    if settings.path == "functional":
        return c.apply(activation)
    return lane_integrate(_lane_system(activation, settings.tm_order), g0, c, 1.0, settings)


def layer_reach(mode: Mode, state: dict[str, TaylorModel], settings: ReachSettings,
                duration: float = 1.0, path: str | None = None) -> dict[str, TaylorModel]:
    """Run one controller mode for ``duration``.

    Proxy-flow modes are recognised and their neurons advanced together as
    one batch; anything else goes through the general integrator.
    """
    if path is not None:
        settings = replace(settings, path=path)
    act, lanes = layer_activation(mode)
    out = dict(state)
    others = {v: f for v, f in mode.flow.items() if not _is_zero(f)}
    if act is not None and duration == 1.0:
        for v, _ in lanes:
            others.pop(v, None)
        g = TaylorModel.stack([state[v] for v, _ in lanes])
        c = TaylorModel.stack([state[j] for _, j in lanes])
        if settings.path == "functional":
            g1 = c.apply(act)
        else:
            g1 = lane_integrate(_lane_system(act, settings.tm_order), g, c, 1.0, settings)
        for k, (v, _) in enumerate(lanes):
            out[v] = g1[k]
        if set(others) <= {"t"}:
            if "t" in others:
                out["t"] = state["t"] + duration
            return out
    if others:
        system = OdeSystem.cached(tuple(sorted(mode.flow.items(), key=lambda kv: kv[0])), settings.tm_order)
        out = integrate(system, out if act is None else {**state, **out}, duration, settings)
    return out


def _affine_form(e: E.Expr):
    """(coeffs, const) if ``e`` is affine in its variables, else None."""
    if isinstance(e, E.Const):
        return {}, e.value
    if isinstance(e, E.Var):
        return {e.name: 1.0}, 0.0
    if isinstance(e, E.Neg):
        r = _affine_form(e.arg)
        return None if r is None else ({k: -v for k, v in r[0].items()}, -r[1])
    if isinstance(e, E.Bin):
        if e.op in "+-":
            a, b = _affine_form(e.left), _affine_form(e.right)
            if a is None or b is None:
                return None
            s = 1.0 if e.op == "+" else -1.0
            co = dict(a[0])
            for k, v in b[0].items():
                co[k] = co.get(k, 0.0) + s * v
            return co, a[1] + s * b[1]
        if e.op == "*":
            if isinstance(e.left, E.Const):
                r = _affine_form(e.right)
                k = e.left.value
            elif isinstance(e.right, E.Const):
                r = _affine_form(e.left)
                k = e.right.value
            else:
                return None
            return None if r is None else ({n: k * v for n, v in r[0].items()}, k * r[1])
    return None


def apply_reset(reset: dict[str, E.Expr], state: dict[str, TaylorModel], basis) -> dict:
    """Simultaneous reset; affine resets go through one matrix product."""
    out = dict(state)
    affine = {}
    general = {}
    for v, e in reset.items():
        f = _affine_form(e)
        (affine if f is not None else general)[v] = f if f is not None else e
    if affine:
        srcs = sorted({n for co, _ in affine.values() for n in co})
        targets = list(affine)
        W = np.zeros((len(targets), len(srcs)))
        b = np.zeros(len(targets))
        for i, v in enumerate(targets):
            co, c0 = affine[v]
            b[i] = c0
            for n, w in co.items():
                W[i, srcs.index(n)] = w
        if srcs:
            X = TaylorModel.stack([state[n] for n in srcs])
            Y = affine_map(W, b, X)
            for i, v in enumerate(targets):
                out[v] = Y[i]
        else:
            for i, v in enumerate(targets):
                out[v] = TaylorModel.const(basis, b[i])
    memo = {}
    for v, e in general.items():
        out[v] = _as_tm(E.evaluate(e, state, memo), basis)
    return out


def affine_map(W: np.ndarray, b: np.ndarray, X: TaylorModel) -> TaylorModel:
    """``W @ X + b`` for a batch ``X`` of shape (n,), with rounding folded in."""
    from .interval import ia_out
    from .taylor import U
    c = W @ X.c
    c[:, 0] += b
    absW = np.abs(W)
    n = W.shape[1]
    err = (n + 2) * U * (absW @ np.abs(X.c).sum(axis=-1) + np.abs(b))
    lo = np.minimum(W * X.lo, W * X.hi).sum(axis=1)
    hi = np.maximum(W * X.lo, W * X.hi).sum(axis=1)
    lo, hi = ia_out(lo - err, hi + err)
    return TaylorModel(X.basis, c, lo, hi)


def _guard_dwell(tr, t_now: float) -> float:
    for g in tr.guard:
        if isinstance(g.expr, E.Var) and g.expr.name == "t" and g.op == "==":
            return g.bound - t_now
    raise ValueError(f"unsupported controller guard {[str(g) for g in tr.guard]}")


def controller_reach(ctrl: HybridAutomaton, inputs: list[TaylorModel], settings: ReachSettings,
                     path: str | None = None) -> list[TaylorModel]:
    """Run a controller automaton from q0 to its terminal mode."""
    basis = inputs[0].basis
    state = {v: TaylorModel.const(basis, 0.0) for v in ctrl.variables}
    for v, tm in zip(ctrl.inputs, inputs):
        state[v] = tm
    mode = ctrl.initial_mode
    t_now = 0.0
    seen = 0
    while True:
        outs = ctrl.outgoing(mode)
        if not outs:
            break
        if len(outs) != 1:
            raise ValueError(f"controller mode {mode} is not deterministic")
        tr = outs[0]
        dwell = _guard_dwell(tr, t_now)
        if dwell < 0:
            raise ValueError(f"guard of {tr.src}->{tr.dst} lies in the past")
        if dwell > 0:
            state = layer_reach(ctrl.modes[mode], state, settings, dwell, path)
        t_now += dwell
        state = apply_reset(dict(tr.reset), state, basis)
        if "t" in tr.reset:
            r = tr.reset["t"]
            t_now = r.value if isinstance(r, E.Const) else t_now
        mode = tr.dst
        seen += 1
        if seen > 10 * len(ctrl.modes):
            raise ValueError("controller automaton does not terminate")
    memo = {}
    return [_as_tm(E.evaluate(o, state, memo), basis) for o in ctrl.observations]


def network_reach(nn, box, settings: ReachSettings | None = None, path: str | None = None):
    """Output enclosures of a network over an input box via its automaton."""
    from .neural import network_to_automaton
    settings = settings or ReachSettings()
    ctrl = network_to_automaton(nn)
    chart = Chart({f"y{k}": Interval.coerce(iv) for k, iv in enumerate(box)}, settings.tm_order)
    st = chart.initial_state()
    outs = controller_reach(ctrl, [st[f"y{k}"] for k in range(len(box))], settings, path)
    return outs, chart


# ---------------------------------------------------------------------------
# Plant steps
# ---------------------------------------------------------------------------


@dataclass
class Event:
    step: int
    kind: str       # "saturation", "exit_possible", "exit"
    detail: str


def discrete_map_step(maps: dict[str, E.Expr], state: dict[str, TaylorModel], inputs=None,
                      saturations=(), step: int = 0, events: list | None = None):
    """Evaluate all maps on the old state, then apply clamps."""
    basis = next(iter(state.values())).basis
    env = dict(state)
    env.update(inputs or {})
    memo = {}
    new = dict(state)
    for v, e in maps.items():
        new[v] = _as_tm(E.evaluate(e, env, memo), basis)
    return apply_saturations(new, saturations, step, events), new


def apply_saturations(state, saturations, step: int = 0, events: list | None = None):
    out = dict(state)
    for var, op, c in saturations:
        tm = out[var]
        r = tm.range()
        if op == ">=":          # clamp from above at c
            if r.lo >= c:
                out[var] = TaylorModel.const(tm.basis, c)
            elif r.hi > c:
                out[var] = TaylorModel.const(tm.basis, Interval(r.lo, c))
            else:
                continue
        else:                   # clamp from below at c
            if r.hi <= c:
                out[var] = TaylorModel.const(tm.basis, c)
            elif r.lo < c:
                out[var] = TaylorModel.const(tm.basis, Interval(c, r.hi))
            else:
                continue
        if events is not None:
            events.append(Event(step, "saturation", f"{var} {op} {c}"))
    return out


def _guard_status(guard, state) -> str:
    """'all', 'some' or 'none' of the set satisfies the conjunction."""
    status = "all"
    memo = {}
    for g in guard:
        r = E.evaluate(g.expr, state, memo)
        r = r.range() if isinstance(r, TaylorModel) else Interval.coerce(r)
        if g.op == ">=":
            yes, no = r.lo >= g.bound, r.hi < g.bound
        elif g.op == "<=":
            yes, no = r.hi <= g.bound, r.lo > g.bound
        else:
            yes, no = r.lo == r.hi == g.bound, not (r.lo <= g.bound <= r.hi)
        if no:
            return "none"
        if not yes:
            status = "some"
    return status


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass
class Flowpipe:
    mode: str
    step: int
    t_lo: float
    t_hi: float
    state: dict[str, TaylorModel] = field(repr=False)
    bounds: dict[str, Interval]


@dataclass
class Exit:
    step: int
    dst: str
    full: bool                      # the whole set satisfies the guard
    bounds: dict[str, Interval]     # after the transition's reset


@dataclass
class ReachNode:
    action: object = None           # action index, tuple of merged indices, or None
    start_step: int = 0
    flowpipes: list[Flowpipe] = field(default_factory=list)
    children: list["ReachNode"] = field(default_factory=list)
    status: str = "running"         # completed | remainder_blowup | branch_limit
    reason: str = ""
    exits: list[Exit] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    parent: "ReachNode | None" = field(default=None, repr=False)

    def path(self) -> list["ReachNode"]:
        out = []
        n = self
        while n is not None:
            out.append(n)
            n = n.parent
        return out[::-1]

    def trace(self) -> list[Flowpipe]:
        return [fp for n in self.path() for fp in n.flowpipes]

    def all_exits(self) -> list[Exit]:
        return [x for n in self.path() for x in n.exits]


@dataclass
class ReachResult:
    root: ReachNode
    chart: Chart = field(repr=False)
    steps: int = 0
    merged: int = 0                 # times the branch limit forced an action hull

    def leaves(self) -> list[ReachNode]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if n.children:
                stack.extend(reversed(n.children))
            else:
                out.append(n)
        return out

    @property
    def n_branches(self) -> int:
        return len(self.leaves())

    @property
    def completed(self) -> bool:
        return all(l.status == "completed" for l in self.leaves())

    def step_bounds(self) -> dict[int, dict[str, Interval]]:
        """Hull over branches of the per-step bounds."""
        out: dict[int, dict[str, Interval]] = {}
        for leaf in self.leaves():
            for fp in leaf.trace():
                cur = out.setdefault(fp.step, {})
                for v, iv in fp.bounds.items():
                    cur[v] = iv if v not in cur else cur[v].hull(iv)
        return dict(sorted(out.items()))


def _hull_actions(actions, idx):
    keys = actions[idx[0]].keys()
    return {k: hull(actions[i][k] for i in idx) for k in keys}


def run_closed_loop(loop: ClosedLoop, initial: dict[str, Interval], steps: int,
                    settings: ReachSettings | None = None, record_tms: bool = False) -> ReachResult:
    """Alternate controller reach and plant advance for ``steps`` control periods."""
    settings = settings or ReachSettings()
    plant = loop.plant
    box = {v: Interval.coerce(initial[v]) if v in initial else plant.initial_set.get(v, Interval(0.0))
           for v in plant.variables}
    chart = Chart(box, settings.tm_order)
    basis = chart.basis
    root = ReachNode()
    result = ReachResult(root, chart, steps)
    state0 = chart.initial_state()
    root.flowpipes.append(Flowpipe(plant.initial_mode, 0, 0.0, 0.0,
                                   state0 if record_tms else {}, bounds_of(state0)))
    leaves = [1]
    # explicit stack of pending branches: (node, state, mode, step, forced)
    stack = [(root, state0, plant.initial_mode, 0, None)]
    while stack:
        node, state, mode, k, forced = stack.pop()
        try:
            _run_branch(loop, node, state, mode, k, forced, steps, settings, basis, stack,
                        leaves, result, record_tms)
        except RemainderBlowup as exc:
            node.status, node.reason = "remainder_blowup", str(exc)
        except OverflowError as exc:
            node.status, node.reason = "remainder_blowup", f"overflow: {exc}"
    return result


def _select_inputs(loop, node, state, k, forced, settings, basis, stack, leaves, result, mode):
    """Plant inputs for this step, or None when the node branched or stopped."""
    if forced is not None:
        a, ubounds = forced
        return {n: TaylorModel.const(basis, float(v)) for n, v in loop.actions[a].items()}, ubounds
    memo = {}
    y = [_as_tm(E.evaluate(w, state, memo), basis) for w in loop.wiring]
    outs = controller_reach(loop.controller, y, settings)
    if not loop.discrete:
        env = dict(zip(_out_names(loop.controller), outs))
        memo = {}
        inputs = {n: _as_tm(E.evaluate(e, env, memo), basis) for n, e in loop.control.items()}
        return inputs, {n: tm.range() for n, tm in inputs.items()}
    b = [o.range() for o in outs]
    ubounds = {f"out_{i + 1}": iv for i, iv in enumerate(b)}
    best_lo = max(iv.lo for iv in b)
    feasible = [i for i, iv in enumerate(b) if iv.hi >= best_lo]
    if len(feasible) == 1:
        a = feasible[0]
        return {n: TaylorModel.const(basis, float(v)) for n, v in loop.actions[a].items()}, ubounds
    extra = len(feasible) - 1
    if leaves[0] + extra <= settings.max_branches:
        leaves[0] += extra
        for i in feasible:
            node.children.append(ReachNode(action=i, start_step=k, parent=node))
        for child in reversed(node.children):
            stack.append((child, state, mode, k, (child.action, ubounds)))
        node.status = "branched"
        return None
    if not settings.merge_on_limit:
        node.status, node.reason = "branch_limit", f"{len(feasible)} feasible actions at step {k}"
        return None
    result.merged += 1
    node.events.append(Event(k, "merged", f"actions {feasible}"))
    hulls = _hull_actions(loop.actions, feasible)
    return {n: TaylorModel.const(basis, iv) for n, iv in hulls.items()}, ubounds


def _run_branch(loop, node, state, mode, k, forced, steps, settings, basis, stack, leaves,
                result, record_tms):
    plant = loop.plant
    while k < steps:
        m = plant.modes[mode]
        if m.kind == "idle":
            node.status = "completed"
            return
        sel = _select_inputs(loop, node, state, k, forced, settings, basis, stack, leaves,
                             result, mode)
        forced = None
        if sel is None:
            return
        inputs, ubounds = sel
        sched = loop.scheduling
        if m.kind == "discrete_map":
            for _ in range(sched.period):
                state, _raw = discrete_map_step(dict(m.flow), state, inputs, plant.saturations(mode),
                                                k + 1, node.events)
        else:
            dt = sched.sample_time if sched.sample_time is not None else 1.0
            system = OdeSystem({**m.flow, **{n: E.ZERO for n in inputs}}, settings.tm_order)
            full = integrate(system, {**state, **inputs}, dt, settings)
            state = {v: full[v] for v in plant.variables}
            state = apply_saturations(state, plant.saturations(mode), k + 1, node.events)
        k += 1
        bnds = bounds_of(state)
        bnds.update(ubounds)
        node.flowpipes.append(Flowpipe(mode, k, float(k), float(k), state if record_tms else {}, bnds))
        widest = max(float(np.max(tm.hi - tm.lo)) for tm in state.values())
        if log.isEnabledFor(logging.DEBUG):
            log.debug("step %d mode %s: %s remainder %.3g", k, mode,
                      " ".join(f"{v}=[{iv.lo:.6g}, {iv.hi:.6g}]" for v, iv in bnds.items()), widest)
        if widest > settings.max_remainder_width:
            node.status, node.reason = "remainder_blowup", f"remainder width {widest:.3g} at step {k}"
            return
        for tr in plant.exits(mode):
            st = _guard_status(tr.guard, state)
            if st == "none":
                continue
            after = apply_reset(dict(tr.reset), state, basis)
            ex = Exit(k, tr.dst, st == "all", bounds_of(after))
            node.exits.append(ex)
            node.events.append(Event(k, "exit" if ex.full else "exit_possible", f"{tr.src}->{tr.dst}"))
            if ex.full:
                node.status = "completed"
                return
    node.status = "completed"


def _out_names(ctrl: HybridAutomaton) -> list[str]:
    return [o.name if isinstance(o, E.Var) else E.to_string(o) for o in ctrl.observations]


# ---------------------------------------------------------------------------
# Initial-set subdivision and dumps
# ---------------------------------------------------------------------------


def _cuts(iv: Interval, k: int) -> list[Interval]:
    pts = [iv.lo] + [float(f"{iv.lo * (1 - i / k) + iv.hi * (i / k):.12g}") for i in range(1, k)] + [iv.hi]
    return [Interval(pts[i], pts[i + 1]) for i in range(k)]


def subdivide_initial_set(box, strategy: tuple) -> list:
    """Split a box into a face-sharing grid.

    ``strategy`` is ``("uniform", k)`` (k pieces per axis with positive width,
    or ``("uniform", k, axis)`` for one axis) or ``("adaptive", w)``
    (ceil(width / w) pieces per axis).  ``box`` is a list of Intervals or a
    dict of them; the result has the same form.
    """
    keys = list(box) if isinstance(box, dict) else None
    sides = [Interval.coerce(box[k]) for k in keys] if keys else [Interval.coerce(x) for x in box]
    kind = strategy[0]
    counts = []
    for a, iv in enumerate(sides):
        if iv.hi == iv.lo:
            counts.append(1)
        elif kind == "uniform":
            k = int(strategy[1])
            if k < 1:
                raise ValueError("uniform subdivision needs k >= 1")
            axis = strategy[2] if len(strategy) > 2 else None
            if axis is not None and keys and not isinstance(axis, int):
                axis = keys.index(axis)
            counts.append(k if axis is None or axis == a else 1)
        elif kind == "adaptive":
            w = float(strategy[1])
            if not w > 0:
                raise ValueError("adaptive subdivision needs w > 0")
            counts.append(max(1, math.ceil((iv.hi - iv.lo) / w - 1e-9)))
        else:
            raise ValueError(f"unknown subdivision strategy {kind!r}")
    pieces = [_cuts(iv, c) for iv, c in zip(sides, counts)]
    out = []
    for combo in _product(pieces):
        out.append(dict(zip(keys, combo)) if keys else list(combo))
    return out


def _product(lists):
    if not lists:
        yield ()
        return
    for x in lists[0]:
        for rest in _product(lists[1:]):
            yield (x,) + rest


def flowpipe_csv(result: ReachResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time_lo", "time_hi", "var", "lo", "hi"])
    for leaf_step, bnds in result.step_bounds().items():
        for v, iv in bnds.items():
            w.writerow([leaf_step, float(leaf_step), float(leaf_step), v, repr(iv.lo), repr(iv.hi)])
    return buf.getvalue()
