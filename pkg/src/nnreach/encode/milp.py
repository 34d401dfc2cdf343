"""Big-M MILP encoding of network reachability in CPLEX LP text.

Per hidden neuron with pre-activation ``z`` in [lo, hi] (from interval
propagation) and post-activation ``h``, one binary ``d_k`` per sandwich piece
[a_k, b_k] selects the active piece::

    sum_k d_k = 1
    z >= a_k - Mx (1 - d_k)          z <= b_k + Mx (1 - d_k)
    h <= u_k(z) + Mu_k (1 - d_k)     h >= l_k(z) - Ml_k (1 - d_k)

Linear layers are plain equality rows.  The LP reader and the brute-force
solver below exist so the emitted text can be checked without an external
MILP solver.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from ..interval import ia_out
from ..neural import NeuralNetwork, UnsupportedActivation
from .pwl import activation_range, pwl_sandwich

_TERMS_PER_LINE = 6


def _num(x: float) -> str:
    return repr(float(x))


def _box_arrays(box):
    lo = np.array([float(b.lo) if hasattr(b, "lo") else float(b[0]) for b in box])
    hi = np.array([float(b.hi) if hasattr(b, "hi") else float(b[1]) for b in box])
    return lo, hi


def neuron_bounds(nn: NeuralNetwork, box):
    """Interval propagation: per layer (pre_lo, pre_hi, post_lo, post_hi)."""
    lo, hi = _box_arrays(box)
    out = []
    for layer in nn.layers:
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        mid = layer.W @ c + layer.b
        rad = np.abs(layer.W) @ r
        zlo, zhi = ia_out(mid - rad, mid + rad, 8)
        if layer.activation == "linear":
            plo, phi = zlo, zhi
        else:
            pairs = [activation_range(layer.activation, a, b) for a, b in zip(zlo, zhi)]
            plo = np.array([p[0] for p in pairs])
            phi = np.array([p[1] for p in pairs])
        out.append((zlo, zhi, plo, phi))
        lo, hi = plo, phi
    return out


def _expr(terms) -> list[str]:
    toks = []
    for c, v in terms:
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        toks.append(f"{sign} {_num(abs(c))} {v}")
    if not toks:
        toks = ["+ 0 " + terms[0][1]] if terms else ["0"]
    if toks[0].startswith("+ "):
        toks[0] = toks[0][2:]
    return toks


def _row(name: str, terms, op: str, rhs: float) -> str:
    toks = _expr(terms)
    lines = []
    for i in range(0, len(toks), _TERMS_PER_LINE):
        lines.append(" ".join(toks[i:i + _TERMS_PER_LINE]))
    body = "\n   ".join(lines)
    return f" {name}: {body} {op} {_num(rhs)}"


def _bigm(x: float) -> float:
    x = max(x, 0.0)
    return x + 1e-9 * (1.0 + x)


def export_milp(nn: NeuralNetwork, box, n_pieces: int = 100, output: int = 0,
                sense: str = "max") -> str:
    if sense not in ("max", "min"):
        raise ValueError("sense must be 'max' or 'min'")
    if not 0 <= output < nn.q:
        raise ValueError(f"output index {output} out of range for {nn.q} outputs")
    for layer in nn.layers:
        if layer.activation not in ("sigmoid", "tanh", "linear"):
            raise UnsupportedActivation(layer.activation)
    bounds = neuron_bounds(nn, box)
    blo, bhi = _box_arrays(box)
    rows, var_bounds, binaries = [], [], []
    gaps = []
    prev = [f"x{j}" for j in range(nn.p)]
    for j in range(nn.p):
        var_bounds.append((prev[j], blo[j], bhi[j]))
    for li, layer in enumerate(nn.layers, 1):
        zlo, zhi, plo, phi = bounds[li - 1]
        last = li == nn.L
        post = [f"y{i}" if last else f"h{li}_{i}" for i in range(layer.rows)]
        for i in range(layer.rows):
            affine = [(float(w), v) for w, v in zip(layer.W[i], prev)]
            if layer.activation == "linear":
                rows.append(_row(f"aff{li}_{i}", [(1.0, post[i])] + [(-c, v) for c, v in affine],
                                 "=", float(layer.b[i])))
                var_bounds.append((post[i], zlo[i], zhi[i]))
                continue
            z = f"z{li}_{i}"
            h = post[i]
            rows.append(_row(f"aff{li}_{i}", [(1.0, z)] + [(-c, v) for c, v in affine],
                             "=", float(layer.b[i])))
            var_bounds.append((z, zlo[i], zhi[i]))
            var_bounds.append((h, plo[i], phi[i]))
            s = pwl_sandwich(layer.activation, (zlo[i], zhi[i]), n_pieces)
            gaps.append(s.max_gap)
            ds = [f"d{li}_{i}_{k}" for k in range(s.n_pieces)]
            binaries.extend(ds)
            rows.append(_row(f"one{li}_{i}", [(1.0, d) for d in ds], "=", 1.0))
            mx = _bigm(zhi[i] - zlo[i])
            for k, d in enumerate(ds):
                a, b = float(s.breakpoints[k]), float(s.breakpoints[k + 1])
                ku, cu = s.upper[k]
                kl, cl = s.lower[k]
                mu = _bigm(phi[i] - min(ku * zlo[i] + cu, ku * zhi[i] + cu))
                ml = _bigm(max(kl * zlo[i] + cl, kl * zhi[i] + cl) - plo[i])
                tag = f"{li}_{i}_{k}"
                rows.append(_row(f"za{tag}", [(1.0, z), (-mx, d)], ">=", a - mx))
                rows.append(_row(f"zb{tag}", [(1.0, z), (mx, d)], "<=", b + mx))
                rows.append(_row(f"hu{tag}", [(1.0, h), (-ku, z), (mu, d)], "<=", cu + mu))
                rows.append(_row(f"hl{tag}", [(1.0, h), (-kl, z), (-ml, d)], ">=", cl - ml))
        prev = post
    head = [
        f"\\ nnreach big-M encoding of {nn!r}",
        f"\\ {sense} of output y{output}; {n_pieces} pieces per neuron",
        f"\\ sandwich max_gap {max(gaps) if gaps else 0.0!r}",
        "Maximize" if sense == "max" else "Minimize",
        f" obj: y{output}",
        "Subject To",
    ]
    tail = ["Bounds"]
    for v, lo, hi in var_bounds:
        tail.append(f" {_num(lo)} <= {v} <= {_num(hi)}")
    if binaries:
        tail.append("Binaries")
        for i in range(0, len(binaries), 8):
            tail.append(" " + " ".join(binaries[i:i + 8]))
    tail.append("End")
    return "\n".join(head + rows + tail) + "\n"


# ---------------------------------------------------------------------------
# LP reader
# ---------------------------------------------------------------------------

class LpParseError(ValueError):
    pass


@dataclass
class LpRow:
    name: str
    coeffs: dict
    op: str
    rhs: float


@dataclass
class LpProblem:
    sense: str
    objective: dict
    rows: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    binaries: list = field(default_factory=list)
    generals: list = field(default_factory=list)

    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.objective)
        for r in self.rows:
            seen.update(dict.fromkeys(r.coeffs))
        seen.update(dict.fromkeys(self.bounds))
        seen.update(dict.fromkeys(self.binaries))
        return list(seen)

    def bound(self, v: str) -> tuple[float, float]:
        if v in self.binaries:
            lo, hi = self.bounds.get(v, (0.0, 1.0))
            return max(lo, 0.0), min(hi, 1.0)
        return self.bounds.get(v, (0.0, math.inf))


_SECTIONS = [
    (re.compile(r"^(maximize|maximise|maximum|max)$", re.I), "max"),
    (re.compile(r"^(minimize|minimise|minimum|min)$", re.I), "min"),
    (re.compile(r"^(subject\s+to|such\s+that|st|s\.t\.)$", re.I), "st"),
    (re.compile(r"^(bounds|bound)$", re.I), "bounds"),
    (re.compile(r"^(binaries|binary|bin)$", re.I), "bin"),
    (re.compile(r"^(generals|general|gen)$", re.I), "gen"),
    (re.compile(r"^end$", re.I), "end"),
]
_TOKEN = re.compile(r"\s*(<=|>=|=<|=>|<|>|=|:|[+-]|[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[A-Za-z_][\w.\[\]]*)")
_NUMBER = re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$")
_OPS = {"<=": "<=", "=<": "<=", "<": "<=", ">=": ">=", "=>": ">=", ">": ">=", "=": "="}


def _tokens(text: str) -> list[str]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise LpParseError(f"cannot tokenize near {text[pos:pos + 20]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def _is_num(t: str) -> bool:
    return bool(_NUMBER.match(t))


def _parse_rows(toks: list[str]) -> list[tuple[str | None, dict, str | None, float | None]]:
    """Split a token stream into (name, coeffs, op, rhs) rows."""
    rows, i, n = [], 0, len(toks)
    while i < n:
        name = None
        if i + 1 < n and toks[i + 1] == ":" and not _is_num(toks[i]):
            name = toks[i]
            i += 2
        coeffs: dict = {}
        op = rhs = None
        sign, coef = 1.0, None
        while i < n:
            t = toks[i]
            if t in _OPS:
                op = _OPS[t]
                i += 1
                rsign = 1.0
                while i < n and toks[i] in ("+", "-"):
                    rsign *= -1.0 if toks[i] == "-" else 1.0
                    i += 1
                if i >= n or not _is_num(toks[i]):
                    raise LpParseError(f"row {name or len(rows) + 1} has no numeric right-hand side")
                rhs = rsign * float(toks[i])
                i += 1
                break
            if i + 1 < n and toks[i + 1] == ":" and not _is_num(t):
                break  # next named objective-style row
            if t in ("+", "-"):
                sign *= -1.0 if t == "-" else 1.0
            elif _is_num(t):
                coef = (coef or 1.0) * float(t)
            else:
                coeffs[t] = coeffs.get(t, 0.0) + sign * (1.0 if coef is None else coef)
                sign, coef = 1.0, None
            i += 1
        rows.append((name, coeffs, op, rhs))
    return rows


def read_lp(text: str) -> LpProblem:
    chunks: dict[str, list[str]] = {"st": [], "bounds": [], "bin": [], "gen": []}
    sense, obj_lines, cur = None, [], None
    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        hit = next((tag for rx, tag in _SECTIONS if rx.match(line)), None)
        if hit == "end":
            break
        if hit in ("max", "min"):
            sense, cur = hit, "obj"
            continue
        if hit:
            cur = hit
            continue
        if cur is None:
            raise LpParseError(f"content before any section: {line!r}")
        (obj_lines if cur == "obj" else chunks[cur]).append(line)
    if sense is None:
        raise LpParseError("no objective section")
    objs = _parse_rows(_tokens(" ".join(obj_lines)))
    objective = objs[0][1] if objs else {}
    prob = LpProblem(sense, objective)
    for k, (name, coeffs, op, rhs) in enumerate(_parse_rows(_tokens(" ".join(chunks["st"])))):
        if op is None:
            raise LpParseError(f"row {name or k} has no relation")
        prob.rows.append(LpRow(name or f"R{k + 1}", coeffs, op, rhs))
    for line in chunks["bounds"]:
        _parse_bound(prob, line)
    for line in chunks["bin"]:
        prob.binaries.extend(line.split())
    for line in chunks["gen"]:
        prob.generals.extend(line.split())
    return prob


def _val(t: str) -> float:
    t = t.lower()
    if t in ("inf", "+inf", "infinity", "+infinity"):
        return math.inf
    if t in ("-inf", "-infinity"):
        return -math.inf
    return float(t)


def _parse_bound(prob: LpProblem, line: str) -> None:
    parts = line.replace("<=", " <= ").replace(">=", " >= ").split()
    if len(parts) == 2 and parts[1].lower() == "free":
        prob.bounds[parts[0]] = (-math.inf, math.inf)
        return
    if len(parts) == 5 and parts[1] == "<=" and parts[3] == "<=":
        prob.bounds[parts[2]] = (_val(parts[0]), _val(parts[4]))
        return
    if len(parts) == 3:
        a, op, b = parts
        var, num, op = (a, b, op) if not _is_num(a) and a.lower() not in ("inf", "-inf") else (b, a, {"<=": ">=", ">=": "<=", "=": "="}.get(op, op))
        lo, hi = prob.bounds.get(var, (0.0, math.inf))
        v = _val(num)
        if op == "<=":
            hi = v
        elif op == ">=":
            lo = v
        elif op == "=":
            lo = hi = v
        else:
            raise LpParseError(f"bad bound {line!r}")
        prob.bounds[var] = (lo, hi)
        return
    raise LpParseError(f"bad bound {line!r}")


# ---------------------------------------------------------------------------
# Brute force: enumerate binaries, solve each continuous LP
# ---------------------------------------------------------------------------

def brute_force(prob: LpProblem, max_binaries: int = 16) -> float | None:
    """Optimum of the MILP by enumerating all 0/1 assignments; None if infeasible."""
    if len(prob.binaries) > max_binaries:
        raise ValueError(f"{len(prob.binaries)} binaries is too many to enumerate")
    if prob.generals:
        raise ValueError("general integer variables are not supported")
    bins = list(prob.binaries)
    cont = [v for v in prob.variables() if v not in set(bins)]
    col = {v: i for i, v in enumerate(cont)}
    n = len(cont)
    sign = -1.0 if prob.sense == "max" else 1.0
    cvec = np.zeros(n)
    for v, c in prob.objective.items():
        if v in col:
            cvec[col[v]] = sign * c
    obj_bins = {v: c for v, c in prob.objective.items() if v in bins}
    bounds = [prob.bound(v) for v in cont]
    best = None
    for assign in itertools.product((0.0, 1.0), repeat=len(bins)):
        fixed = dict(zip(bins, assign))
        A_ub, b_ub, A_eq, b_eq = [], [], [], []
        ok = True
        for r in prob.rows:
            a = np.zeros(n)
            rhs = r.rhs
            for v, c in r.coeffs.items():
                if v in fixed:
                    rhs -= c * fixed[v]
                else:
                    a[col[v]] += c
            if not a.any():
                # binary-only row: decide it directly
                tol = 1e-9
                if (r.op == "=" and abs(rhs) > tol) or (r.op == "<=" and rhs < -tol) or (r.op == ">=" and rhs > tol):
                    ok = False
                    break
                continue
            if r.op == "<=":
                A_ub.append(a)
                b_ub.append(rhs)
            elif r.op == ">=":
                A_ub.append(-a)
                b_ub.append(-rhs)
            else:
                A_eq.append(a)
                b_eq.append(rhs)
        if not ok:
            continue
        res = linprog(cvec, A_ub=np.array(A_ub) if A_ub else None, b_ub=b_ub or None,
                      A_eq=np.array(A_eq) if A_eq else None, b_eq=b_eq or None,
                      bounds=bounds, method="highs")
        if res.status != 0:
            continue
        val = sign * res.fun + sum(c * fixed[v] for v, c in obj_bins.items())
        if best is None or (val > best if prob.sense == "max" else val < best):
            best = val
    return best


def count_rows(prob: LpProblem) -> dict[str, int]:
    """Row counts by kind, keyed on the name prefixes the writer uses."""
    kinds = {"sum": 0, "bigm": 0, "affine": 0, "other": 0}
    for r in prob.rows:
        if r.name.startswith("one"):
            kinds["sum"] += 1
        elif r.name[:2] in ("za", "zb", "hu", "hl"):
            kinds["bigm"] += 1
        elif r.name.startswith("aff"):
            kinds["affine"] += 1
        else:
            kinds["other"] += 1
    return kinds
