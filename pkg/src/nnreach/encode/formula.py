"""Real-arithmetic encodings of network reachability as SMT-LIB 2 text.

``phi0``: one equation per neuron, ``h = 1/(1 + exp(-(W h_prev + b)))``
(tanh as ``2/(1 + exp(-2 s)) - 1``), with ``exp`` declared as a function
symbol standing for the real exponential.

``exp_free``: for one hidden layer, write every effective first-layer
coefficient as ``r / d0`` with integer ``r``.  Substituting
``y_j = exp(-x_j / d0)`` turns ``exp(-(w . x))`` into the monomial
``prod_j y_j^r_j``; negative powers use ``z_j`` with ``y_j z_j = 1``.  High
powers are built by repeated squaring so the text stays small.  The
remaining constants ``exp(-b)`` and the bounds of ``y_j`` are transcendental
in general and are written as decimal approximations.

The evaluator at the bottom substitutes a model into emitted text and
reports a residual for every assertion.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..interval import down, up
from ..neural import NeuralNetwork, UnsupportedActivation, eval_network
from .milp import _box_arrays


class ExpFreeNeedsSingleHiddenLayer(ValueError):
    pass


class NonRationalWeightGuard(ValueError):
    pass


# ---------------------------------------------------------------------------
# Exact numbers
# ---------------------------------------------------------------------------

def rational(text) -> Fraction:
    """Exact value of a decimal literal (or of a float's shortest repr)."""
    if not isinstance(text, str):
        text = repr(float(text))
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise NonRationalWeightGuard(f"weight {text!r} is not a finite decimal fraction") from None


def _layer_rationals(layer):
    W_text = layer.W_text or tuple(tuple(repr(float(w)) for w in row) for row in layer.W)
    b_text = layer.b_text or tuple(repr(float(x)) for x in layer.b)
    W = [[rational(t) for t in row] for row in W_text]
    b = [rational(t) for t in b_text]
    return W, b


def smt_num(q) -> str:
    """SMT-LIB literal for a rational (decimal when the denominator allows)."""
    q = Fraction(q)
    neg, q = q < 0, abs(q)
    if q.denominator == 1:
        s = str(q.numerator)
    else:
        den = q.denominator
        k = next((k for k in range(61) if (10 ** k) % den == 0), None)
        if k is not None:
            digits = str(q.numerator * (10 ** k // den)).rjust(k + 1, "0")
            s = digits[:-k] + "." + digits[-k:]
        else:
            s = f"(/ {q.numerator} {q.denominator})"
    return f"(- {s})" if neg else s


def _flt(x: float) -> str:
    return smt_num(Fraction(repr(float(x))))


def _sum(terms: list[str]) -> str:
    if not terms:
        return "0"
    return terms[0] if len(terms) == 1 else "(+ " + " ".join(terms) + ")"


def _affine(W_row, b, src) -> str:
    terms = [f"(* {smt_num(w)} {v})" for w, v in zip(W_row, src) if w != 0]
    if b != 0 or not terms:
        terms.append(smt_num(b))
    return _sum(terms)


# ---------------------------------------------------------------------------
# Output predicates
# ---------------------------------------------------------------------------

_PRED = re.compile(r"^\s*(y\d+)\s*(<=|>=|=|<|>)\s*([-+]?[\d.]+(?:[eE][-+]?\d+)?)\s*$")


def parse_predicate(pred) -> list[tuple[str, str, Fraction]]:
    """``"y0 >= 6.5"`` or a list of such strings, read as a conjunction."""
    if pred is None:
        return []
    items = [pred] if isinstance(pred, str) else list(pred)
    out = []
    for item in items:
        for part in str(item).split(" and "):
            m = _PRED.match(part)
            if not m:
                raise ValueError(f"cannot read output predicate {part!r}")
            out.append((m.group(1), m.group(2), Fraction(m.group(3))))
    return out


def _pred_asserts(pred, q: int, prefix: str = "y") -> list[str]:
    out = []
    for var, op, val in parse_predicate(pred):
        if int(var[1:]) >= q:
            raise ValueError(f"predicate names {var} but the network has {q} outputs")
        out.append(f"(assert (! ({op} {prefix}{var[1:]} {smt_num(val)}) :named property))")
    return out


def _box_asserts(box, names) -> list[str]:
    lo, hi = _box_arrays(box)
    out = []
    for v, a, b in zip(names, lo, hi):
        out.append(f"(assert (<= {_flt(a)} {v}))")
        out.append(f"(assert (<= {v} {_flt(b)}))")
    return out


# ---------------------------------------------------------------------------
# phi0
# ---------------------------------------------------------------------------

def _neuron_eq(act: str, h: str, s: str) -> str:
    if act == "sigmoid":
        return f"(assert (= {h} (/ 1 (+ 1 (exp (- {s}))))))"
    if act == "tanh":
        return f"(assert (= {h} (- (/ 2 (+ 1 (exp (* (- 2) {s})))) 1)))"
    if act == "linear":
        return f"(assert (= {h} {s}))"
    raise UnsupportedActivation(act)


def _phi0(nn: NeuralNetwork, box, pred) -> str:
    decls, body = [], []
    src = [f"x{j}" for j in range(nn.p)]
    decls += [f"(declare-fun {v} () Real)" for v in src]
    body += _box_asserts(box, src)
    for li, layer in enumerate(nn.layers, 1):
        W, b = _layer_rationals(layer)
        last = li == nn.L
        dst = [f"y{i}" if last else f"h{li}_{i}" for i in range(layer.rows)]
        decls += [f"(declare-fun {v} () Real)" for v in dst]
        for i in range(layer.rows):
            body.append(_neuron_eq(layer.activation, dst[i], _affine(W[i], b[i], src)))
        src = dst
    head = [
        "; nnreach formula export, form phi0",
        f"; network {nn!r}",
        "; exp denotes the real exponential function",
        "(set-logic QF_UFNRA)",
        "(declare-fun exp (Real) Real)",
    ]
    return "\n".join(head + decls + body + _pred_asserts(pred, nn.q) + ["(check-sat)", "(exit)"]) + "\n"


# ---------------------------------------------------------------------------
# exp_free
# ---------------------------------------------------------------------------

@dataclass
class FormulaRewrite:
    d0: int
    # r[i][j] = d0 * effective coefficient of input j in hidden neuron i
    r: list
    # exp(-effective bias) per hidden neuron, as a float approximation
    exp_bias: list
    # [exp(-beta_j/d0), exp(-alpha_j/d0)], rounded outward
    y_bounds: list
    # (y_j, z_j) pairs for inputs that appear with a negative exponent
    pairs: list


def formula_rewrite(nn: NeuralNetwork, box) -> FormulaRewrite:
    if nn.L != 2:
        raise ExpFreeNeedsSingleHiddenLayer(f"exp_free needs exactly one hidden layer, network has {nn.L - 1}")
    hidden, out = nn.layers
    if hidden.activation not in ("sigmoid", "tanh"):
        raise UnsupportedActivation(f"exp_free hidden layer must be sigmoid or tanh, got {hidden.activation}")
    if out.activation != "linear":
        raise UnsupportedActivation(f"exp_free output layer must be linear, got {out.activation}")
    W, b = _layer_rationals(hidden)
    _layer_rationals(out)
    k = 2 if hidden.activation == "tanh" else 1
    eff = [[k * w for w in row] for row in W]
    d0 = 1
    for row in eff:
        for w in row:
            d0 = math.lcm(d0, w.denominator)
    r = [[int(w * d0) for w in row] for row in eff]
    exp_bias = [math.exp(-float(k * bi)) for bi in b]
    lo, hi = _box_arrays(box)
    y_bounds = [(down(math.exp(-float(hi[j]) / d0)), up(math.exp(-float(lo[j]) / d0)))
                for j in range(nn.p)]
    pairs = [(f"y{j}", f"z{j}") for j in range(nn.p) if any(row[j] < 0 for row in r)]
    return FormulaRewrite(d0, r, exp_bias, y_bounds, pairs)


def _power_chain(base: str, top: int):
    """Names for base^(2^k), k = 0..bits(top)-1, with their defining equations."""
    names, eqs = [base], []
    for k in range(1, max(top.bit_length(), 1)):
        n = f"{base}_p{k}"
        eqs.append(f"(assert (= {n} (* {names[-1]} {names[-1]})))")
        names.append(n)
    return names, eqs


def _monomial(chains: dict, base: str, e: int) -> list[str]:
    names = chains[base]
    return [names[k] for k in range(e.bit_length()) if (e >> k) & 1]


def _exp_free(nn: NeuralNetwork, box, pred) -> str:
    rw = formula_rewrite(nn, box)
    hidden, out = nn.layers
    Wo, bo = _layer_rationals(out)
    decls, body = [], []
    top_y = [max([row[j] for row in rw.r] + [0]) for j in range(nn.p)]
    top_z = [max([-row[j] for row in rw.r] + [0]) for j in range(nn.p)]
    chains = {}
    for j in range(nn.p):
        y = f"y{j}"
        chains[y], eqs = _power_chain(y, top_y[j])
        decls += [f"(declare-fun {v} () Real)" for v in chains[y]]
        lo, hi = rw.y_bounds[j]
        body.append(f"(assert (<= {_flt(lo)} {y}))")
        body.append(f"(assert (<= {y} {_flt(hi)}))")
        body += eqs
        if top_z[j] > 0:
            z = f"z{j}"
            chains[z], eqs = _power_chain(z, top_z[j])
            decls += [f"(declare-fun {v} () Real)" for v in chains[z]]
            body.append(f"(assert (= (* {y} {z}) 1))")
            body += eqs
    hs = [f"h{i}" for i in range(hidden.rows)]
    decls += [f"(declare-fun {v} () Real)" for v in hs]
    for i, h in enumerate(hs):
        factors = [_flt(rw.exp_bias[i])]
        for j, e in enumerate(rw.r[i]):
            if e > 0:
                factors += _monomial(chains, f"y{j}", e)
            elif e < 0:
                factors += _monomial(chains, f"z{j}", -e)
        mono = factors[0] if len(factors) == 1 else "(* " + " ".join(factors) + ")"
        if hidden.activation == "sigmoid":
            body.append(f"(assert (= (* {h} (+ 1 {mono})) 1))")
        else:
            body.append(f"(assert (= (* (+ {h} 1) (+ 1 {mono})) 2))")
    # y<j> names the substituted inputs here, so outputs are u<i>
    outs = [f"u{i}" for i in range(out.rows)]
    decls += [f"(declare-fun {v} () Real)" for v in outs]
    for i, u in enumerate(outs):
        body.append(f"(assert (= {u} {_affine(Wo[i], bo[i], hs)}))")
    preds = _pred_asserts(pred, nn.q, prefix="u")
    head = [
        "; nnreach formula export, form exp_free",
        f"; network {nn!r}",
        f"; d0 = {rw.d0}; y_j = exp(-x_j / d0), z_j = 1 / y_j; output y<i> of the network is u<i> here",
        "; caveat: the bounds of y_j and the constants exp(-b_i) are decimal approximations;",
        "; the exact formula is exponential-free with rational data only when these are rational",
        "(set-logic QF_NRA)",
    ]
    return "\n".join(head + decls + body + preds + ["(check-sat)", "(exit)"]) + "\n"


def export_formula(nn: NeuralNetwork, box, predicate=None, form: str = "phi0") -> str:
    if form == "phi0":
        return _phi0(nn, box, predicate)
    if form in ("exp_free", "expfree"):
        return _exp_free(nn, box, predicate)
    raise ValueError(f"unknown formula form {form!r}")


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

class SmtParseError(ValueError):
    pass


def _sexprs(text: str):
    toks = re.findall(r"\(|\)|[^\s()]+", "\n".join(ln.split(";", 1)[0] for ln in text.splitlines()))
    stack, out = [[]], None
    for t in toks:
        if t == "(":
            stack.append([])
        elif t == ")":
            if len(stack) < 2:
                raise SmtParseError("unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(t)
    if len(stack) != 1:
        raise SmtParseError("unbalanced '('")
    out = stack[0]
    return out


def _ev(term, model):
    if isinstance(term, str):
        if re.match(r"^\d+(\.\d+)?$", term):
            return float(term)
        if term not in model:
            raise KeyError(f"no value for {term}")
        return float(model[term])
    op, args = term[0], term[1:]
    if op == "!":
        return _ev(args[0], model)
    vals = [_ev(a, model) for a in args]
    if op == "+":
        return float(sum(vals))
    if op == "-":
        return -vals[0] if len(vals) == 1 else vals[0] - sum(vals[1:])
    if op == "*":
        return float(np.prod(vals))
    if op == "/":
        acc = vals[0]
        for v in vals[1:]:
            acc /= v
        return acc
    if op == "exp":
        return math.exp(vals[0])
    raise SmtParseError(f"unsupported operator {op!r}")


def _residual(term, model) -> float:
    """0 when the atom holds; otherwise its violation relative to max(1, |sides|)."""
    if isinstance(term, list) and term and term[0] == "!":
        return _residual(term[1], model)
    if isinstance(term, list) and term and term[0] == "and":
        return max((_residual(t, model) for t in term[1:]), default=0.0)
    op = term[0]
    if op not in ("=", "<=", ">=", "<", ">"):
        raise SmtParseError(f"assertion is not a comparison: {op!r}")
    a, b = _ev(term[1], model), _ev(term[2], model)
    scale = max(1.0, abs(a), abs(b))
    if op == "=":
        d = abs(a - b)
    elif op in ("<=", "<"):
        d = max(0.0, a - b)
    else:
        d = max(0.0, b - a)
    return d / scale


def _name(term) -> str | None:
    if isinstance(term, list) and term and term[0] == "!":
        for k in range(2, len(term) - 1):
            if term[k] == ":named":
                return term[k + 1]
    return None


def formula_residuals(text: str, model: dict) -> list[tuple[str | None, float]]:
    """(name, residual) for every ``assert`` in the text."""
    out = []
    for cmd in _sexprs(text):
        if isinstance(cmd, list) and cmd and cmd[0] == "assert":
            out.append((_name(cmd[1]), _residual(cmd[1], model)))
    return out


def declared(text: str) -> list[str]:
    return [c[1] for c in _sexprs(text) if isinstance(c, list) and c and c[0] == "declare-fun"
            and c[2] == []]


def point_model(nn: NeuralNetwork, x, form: str = "phi0", box=None) -> dict:
    """Exact evaluation of every emitted variable at input ``x``."""
    x = np.asarray(x, dtype=float)
    model = {}
    a = x
    acts = []
    for layer in nn.layers:
        a = eval_network(NeuralNetwork([layer]), a)
        acts.append(a)
    if form == "phi0":
        model.update({f"x{j}": v for j, v in enumerate(x)})
        for li, vals in enumerate(acts, 1):
            last = li == nn.L
            for i, v in enumerate(vals):
                model[f"y{i}" if last else f"h{li}_{i}"] = v
        return model
    rw = formula_rewrite(nn, box)
    for j in range(nn.p):
        y = math.exp(-x[j] / rw.d0)
        for k in range(max(max([row[j] for row in rw.r] + [0]).bit_length(), 1)):
            model[f"y{j}" if k == 0 else f"y{j}_p{k}"] = y ** (2 ** k)
        for k in range(max(max([-row[j] for row in rw.r] + [0]).bit_length(), 1)):
            model[f"z{j}" if k == 0 else f"z{j}_p{k}"] = (1.0 / y) ** (2 ** k)
    model.update({f"h{i}": v for i, v in enumerate(acts[0])})
    model.update({f"u{i}": v for i, v in enumerate(acts[1])})
    return model
