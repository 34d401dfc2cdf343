"""Feed-forward sigmoid/tanh networks and their hybrid-automaton form.

Each hidden neuron becomes a proxy state ``xP`` driven by a constant ``xJ``
(its pre-activation) over one unit of time::

    sigmoid:  xP' = xJ * xP * (1 - xP),   xP(0) = 0.5   ->  xP(1) = sigmoid(xJ)
    tanh:     xP' = xJ * (1 - xP^2),      xP(0) = 0     ->  xP(1) = tanh(xJ)

Weight file format::

    nnet <p> <q> <L>
    layer <rows> <cols> <activation>     (repeated L times)
    <rows lines of cols weights>
    <one line of rows biases>

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

import numpy as np

from . import expr as E
from .automaton import HybridAutomaton, Mode, Transition
from .interval import Interval, sigmoid

ACTIVATIONS = ("sigmoid", "tanh", "linear")


class FormatError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DimensionMismatch(ValueError):
    pass


class ArityMismatch(ValueError):
    pass


class UnsupportedActivation(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str
    # decimal text of each entry as read from file (None when built in code)
    W_text: tuple | None = None
    b_text: tuple | None = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if W.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"{W.shape[0]} weight rows but {b.shape[0]} biases")
        if self.activation not in ACTIVATIONS:
            raise UnsupportedActivation(self.activation)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def rows(self) -> int:
        return self.W.shape[0]

    @property
    def cols(self) -> int:
        return self.W.shape[1]


class NeuralNetwork:
    def __init__(self, layers: list[Layer]):
        if not layers:
            raise DimensionMismatch("network has no layers")
        for i in range(1, len(layers)):
            if layers[i].cols != layers[i - 1].rows:
                raise DimensionMismatch(
                    f"layer {i + 1} takes {layers[i].cols} inputs, layer {i} gives {layers[i - 1].rows}")
        self.layers = list(layers)

    @property
    def p(self) -> int:
        return self.layers[0].cols

    @property
    def q(self) -> int:
        return self.layers[-1].rows

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return max(l.rows for l in self.layers)

    def __call__(self, y):
        return eval_network(self, y)

    def __repr__(self):
        dims = "-".join(str(d) for d in [self.p] + [l.rows for l in self.layers])
        acts = "/".join(l.activation for l in self.layers)
        return f"NeuralNetwork({dims}, {acts})"


def _act(name: str, x):
    if name == "sigmoid":
        return np.vectorize(sigmoid)(x) if np.ndim(x) else sigmoid(x)
    if name == "tanh":
        return np.tanh(x)
    return x


def eval_network(nn: NeuralNetwork, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != nn.p:
        raise ArityMismatch(f"network takes {nn.p} inputs, got {y.shape[0]}")
    for layer in nn.layers:
        y = _act(layer.activation, layer.W @ y + layer.b)
    return y


def eval_network_batch(nn: NeuralNetwork, Y) -> np.ndarray:
    """Forward pass on rows of ``Y``; sigmoid in its tanh form for speed."""
    A = np.asarray(Y, dtype=float)
    for layer in nn.layers:
        Z = A @ layer.W.T + layer.b
        if layer.activation == "sigmoid":
            A = 0.5 * (1.0 + np.tanh(0.5 * Z))
        elif layer.activation == "tanh":
            A = np.tanh(Z)
        else:
            A = Z
    return A


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


def _numbers(tokens, lineno):
    out = []
    for t in tokens:
        try:
            Decimal(t)
            out.append(float(t))
        except (InvalidOperation, ValueError):
            raise FormatError(lineno, f"not a decimal number: {t!r}") from None
        if not math.isfinite(out[-1]):
            raise FormatError(lineno, f"non-finite number: {t!r}")
    return out


def load_network(text: str) -> NeuralNetwork:
    lines = [(i, ln.split()) for i, ln in enumerate(text.splitlines(), 1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise FormatError(1, "empty file")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(lines[-1][0] + 1, "unexpected end of file")
        pos += 1
        return lines[pos - 1]

    ln, head = take()
    if len(head) != 4 or head[0] != "nnet":
        raise FormatError(ln, "expected 'nnet <p> <q> <L>'")
    try:
        p, q, L = (int(x) for x in head[1:])
    except ValueError:
        raise FormatError(ln, "header counts must be integers") from None
    layers = []
    for k in range(L):
        ln, h = take()
        if len(h) != 4 or h[0] != "layer":
            raise FormatError(ln, "expected 'layer <rows> <cols> <activation>'")
        try:
            rows, cols = int(h[1]), int(h[2])
        except ValueError:
            raise FormatError(ln, "layer sizes must be integers") from None
        act = h[3]
        if act not in ACTIVATIONS:
            raise FormatError(ln, f"unknown activation {act!r}")
        W, W_text = [], []
        for _ in range(rows):
            ln, toks = take()
            if toks and toks[0] in ("layer", "nnet"):
                raise DimensionMismatch(f"layer {k + 1}: fewer than {rows} weight rows (line {ln})")
            if len(toks) != cols:
                raise DimensionMismatch(f"layer {k + 1}: line {ln} has {len(toks)} weights, expected {cols}")
            W.append(_numbers(toks, ln))
            W_text.append(tuple(toks))
        ln, toks = take()
        if len(toks) != rows:
            raise DimensionMismatch(f"layer {k + 1}: line {ln} has {len(toks)} biases, expected {rows}")
        b = _numbers(toks, ln)
        layers.append(Layer(np.array(W).reshape(rows, cols), np.array(b), act,
                            tuple(W_text), tuple(toks)))
    if pos != len(lines):
        raise FormatError(lines[pos][0], "trailing content after last layer")
    nn = NeuralNetwork(layers)
    if nn.p != p or nn.q != q:
        raise DimensionMismatch(f"header says {p} -> {q}, layers give {nn.p} -> {nn.q}")
    return nn


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_network(nn: NeuralNetwork, comment: str = "") -> str:
    out = [f"# {ln}" for ln in comment.splitlines()]
    out.append(f"nnet {nn.p} {nn.q} {nn.L}")
    for layer in nn.layers:
        out.append(f"layer {layer.rows} {layer.cols} {layer.activation}")
        for row in layer.W:
            out.append(" ".join(_fmt(w) for w in row))
        out.append(" ".join(_fmt(x) for x in layer.b))
    return "\n".join(out) + "\n"


def read_network(path: str) -> NeuralNetwork:
    with open(path) as fh:
        return load_network(fh.read())


# ---------------------------------------------------------------------------
# Network -> hybrid automaton
# ---------------------------------------------------------------------------

FLOW_TEMPLATES = {
    "sigmoid": E.parse("c * g * (1 - g)"),
    "tanh": E.parse("c * (1 - g^2)"),
}
PROXY_START = {"sigmoid": 0.5, "tanh": 0.0}


def proxy_flow(activation: str, g: str, c: str) -> E.Expr:
    return E.substitute(FLOW_TEMPLATES[activation], {"g": E.Var(g), "c": E.Var(c)})


def state_names(width: int, q: int) -> tuple[list[str], list[str], list[str]]:
    xp = [f"xP_{i}" for i in range(1, width + 1)]
    xj = [f"xJ_{i}" for i in range(1, width + 1)]
    us = ["u"] if q == 1 else [f"u_{i}" for i in range(1, q + 1)]
    return xp, xj, us


def _affine(W_row, b, src: list[str]) -> E.Expr:
    acc: E.Expr = E.Const(float(b))
    terms = [E.mul(E.Const(float(w)), E.Var(s)) for w, s in zip(W_row, src) if w != 0.0]
    for t in terms:
        acc = E.add(acc, t)
    return acc


def network_to_automaton(nn: NeuralNetwork, input_box=None) -> HybridAutomaton:
    """Hybrid automaton whose terminal-mode ``u`` is the network image.

    Modes ``q0`` (load), ``q1..q{L-1}`` (hidden layers), ``qL`` (terminal) and,
    when the last layer is nonlinear, one extra activation mode before the
    terminal one.  Proxy states are padded to the widest layer (and to p);
    padded lanes have zero flow.
    """
    for i, layer in enumerate(nn.layers):
        ok = ACTIVATIONS if i == nn.L - 1 else ("sigmoid", "tanh")
        if layer.activation not in ok:
            raise UnsupportedActivation(f"layer {i + 1}: {layer.activation}")
    final_nl = nn.layers[-1].activation != "linear"
    width = max(nn.p, max(l.rows for l in nn.layers))
    xp, xj, us = state_names(width, nn.q)
    variables = xp + xj + us + ["t"]
    zero = E.Const(0.0)
    one = E.Const(1.0)

    def flows(act: str | None, active: int, t_rate: E.Expr):
        f = {v: zero for v in variables}
        f["t"] = t_rate
        if act is not None:
            for j in range(active):
                f[xp[j]] = proxy_flow(act, xp[j], xj[j])
        return f

    def layer_reset(layer: Layer, src_width: int):
        r = {}
        start = PROXY_START[layer.activation]
        for j in range(width):
            if j < layer.rows:
                r[xp[j]] = E.Const(start)
                r[xj[j]] = _affine(layer.W[j], layer.b[j], xp[:src_width])
            else:
                r[xp[j]] = zero
                r[xj[j]] = zero
        r["t"] = zero
        return r

    # the proxy flows are written over the declared variables only
    modes = {"q0": Mode("q0", "ode", flows(None, 0, one), (E.parse_constraint("t <= 0"),))}
    transitions = []
    hidden = nn.layers[:-1]
    prev, prev_w = "q0", nn.p
    for i, layer in enumerate(hidden, 1):
        name = f"q{i}"
        modes[name] = Mode(name, "ode", flows(layer.activation, layer.rows, one),
                           (E.parse_constraint("t <= 1"),))
        guard = "t == 0" if prev == "q0" else "t == 1"
        transitions.append(Transition(prev, name, (E.parse_constraint(guard),), layer_reset(layer, prev_w)))
        prev, prev_w = name, layer.rows
    last = nn.layers[-1]
    guard = (E.parse_constraint("t == 0" if prev == "q0" else "t == 1"),)
    idx = len(hidden) + 1
    if final_nl:
        name = f"q{idx}"
        modes[name] = Mode(name, "ode", flows(last.activation, last.rows, one),
                           (E.parse_constraint("t <= 1"),))
        transitions.append(Transition(prev, name, guard, layer_reset(last, prev_w)))
        term = f"q{idx + 1}"
        reset = {u: E.Var(xp[k]) for k, u in enumerate(us)}
        transitions.append(Transition(name, term, (E.parse_constraint("t == 1"),), reset))
    else:
        term = f"q{idx}"
        reset = {u: _affine(last.W[k], last.b[k], xp[:prev_w]) for k, u in enumerate(us)}
        transitions.append(Transition(prev, term, guard, reset))
    modes[term] = Mode(term, "ode", flows(None, 0, zero), (E.parse_constraint("t <= 0"),))

    init = {v: Interval(0.0) for v in variables}
    if input_box is not None:
        for k, iv in enumerate(input_box):
            init[xp[k]] = Interval.coerce(iv)
    h = HybridAutomaton(variables, modes, transitions, "q0", init,
                        [E.Var(u) for u in us], xp[:nn.p], name="controller", source=nn)
    return h


def layer_activation(mode: Mode) -> tuple[str | None, list[tuple[str, str]]]:
    """Recognise a proxy-flow mode: its activation and (xP, xJ) lanes."""
    act = None
    lanes = []
    for v, f in mode.flow.items():
        if not v.startswith("xP_") or (isinstance(f, E.Const) and f.value == 0.0):
            continue
        c = "xJ_" + v[3:]
        for name in FLOW_TEMPLATES:
            if f == proxy_flow(name, v, c):
                if act not in (None, name):
                    return None, []
                act = name
                lanes.append((v, c))
                break
        else:
            return None, []
    return act, lanes
