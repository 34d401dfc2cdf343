"""Built-in plants (Mountain Car, quadrotor) and reference controller fixtures."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.optimize import minimize

from . import expr as E
from .automaton import ClosedLoop, HybridAutomaton, Mode, Transition, compose_closed_loop
from .expr import Constraint
from .interval import Interval
from .neural import Layer, NeuralNetwork, dump_network, load_network, network_to_automaton

log = logging.getLogger("nnreach.cases")

GRAVITY = 9.81
MC_GOAL = 0.45
MC_P0 = Interval(-0.6, -0.4)
QUAD_DT = 0.1
QUAD_B = 0.25
QUAD_BOUND = 0.32
QUAD_BOX = Interval(-0.05, 0.05)

# (theta, phi, tau) for action index 4*i_theta + 2*i_phi + i_tau
QUAD_ACTIONS = [
    {"theta": th, "phi": ph, "tau": ta}
    for th in (-0.1, 0.1) for ph in (-0.1, 0.1) for ta in (7.81, 11.81)
]

FIXTURE_VERSION = "v1"


class BadAction(ValueError):
    pass


class FixtureQualityFailure(RuntimeError):
    pass


def toy_network() -> NeuralNetwork:
    """Two sigmoid neurons, linear output ``3 h1 + 5 h2``; monotone on positive boxes."""
    text = ("nnet 2 1 2\n"
            "layer 2 2 sigmoid\n0.3 0.2\n0.1 0.5\n0.1 0.2\n"
            "layer 1 2 linear\n3 5\n0\n")
    return load_network(text)


TOY_BOX = (Interval(2.0, 3.0), Interval(1.0, 2.0))


# ---------------------------------------------------------------------------
# Plants
# ---------------------------------------------------------------------------


def _clamp(mode: str, var: str, lo: float, hi: float) -> list[Transition]:
    return [
        Transition(mode, mode, (Constraint(E.Var(var), ">=", hi),), {var: E.Const(hi)}),
        Transition(mode, mode, (Constraint(E.Var(var), "<=", lo),), {var: E.Const(lo)}),
    ]


def mountain_car_model(goal: float = MC_GOAL) -> HybridAutomaton:
    """Discrete-time Mountain Car with reward bookkeeping.

    The maps are applied simultaneously, then velocity and position are
    clamped; entering ``p >= goal`` moves to the idle mode ``goal`` and adds
    the +100 bonus.
    """
    flow = {
        "p": E.parse("p + v"),
        "v": E.parse("v + 0.0015 * u - 0.0025 * cos(3 * p)"),
        "r": E.parse("r - 0.1 * u^2"),
    }
    modes = {"drive": Mode("drive", "discrete_map", flow), "goal": Mode("goal", "idle", {})}
    transitions = _clamp("drive", "v", -0.07, 0.07) + _clamp("drive", "p", -1.2, 0.6)
    transitions.append(Transition("drive", "goal", (Constraint(E.Var("p"), ">=", goal),),
                                  {"r": E.parse("r + 100")}))
    return HybridAutomaton(
        ["p", "v", "r"], modes, transitions, "drive",
        {"p": MC_P0, "v": Interval(0.0), "r": Interval(0.0)},
        [E.Var("p"), E.Var("v")], ["u"], name="mountain_car",
    )


QUAD_VARS = ["px", "py", "pz", "vx", "vy", "vz"]


def quadrotor_model(action=None, b=(QUAD_B, QUAD_B, QUAD_B)) -> HybridAutomaton:
    """Quadrotor position relative to a planner moving at constant velocity ``b``.

    With ``action`` (an index 0..7) the controls are fixed; with ``None`` the
    plant keeps ``theta``, ``phi``, ``tau`` as inputs.
    """
    b = tuple(float(x) for x in b)
    if len(b) != 3 or any(abs(x) > QUAD_B for x in b):
        raise BadAction(f"planner velocity {b} outside [-{QUAD_B}, {QUAD_B}]^3")
    if action is None:
        ctl = {k: E.Var(k) for k in ("theta", "phi", "tau")}
        inputs = ["theta", "phi", "tau"]
    else:
        if isinstance(action, bool) or not isinstance(action, (int, np.integer)) \
                or not 0 <= action < len(QUAD_ACTIONS):
            raise BadAction(f"action must be an index in 0..{len(QUAD_ACTIONS) - 1}, got {action!r}")
        ctl = {k: E.Const(v) for k, v in QUAD_ACTIONS[action].items()}
        inputs = []
    g = E.Const(GRAVITY)
    flow = {
        "px": E.Var("vx") - b[0],
        "py": E.Var("vy") - b[1],
        "pz": E.Var("vz") - b[2],
        "vx": g * E.Call("tan", ctl["theta"]),
        "vy": -(g * E.Call("tan", ctl["phi"])),
        "vz": ctl["tau"] - g,
    }
    if action is not None:  # fold the constant accelerations
        flow.update({v: E.Const(E.evaluate(flow[v], {})) for v in ("vx", "vy", "vz")})
    init = {v: Interval(0.0) for v in QUAD_VARS}
    init["px"] = init["py"] = QUAD_BOX
    return HybridAutomaton(list(QUAD_VARS), {"fly": Mode("fly", "ode", flow)}, [], "fly", init,
                           [E.Var(v) for v in QUAD_VARS], inputs, name="quadrotor")


def rk4_discretize(h: HybridAutomaton, dt: float) -> HybridAutomaton:
    """Replace every ODE mode by one classical Runge-Kutta step of length ``dt``."""
    modes = {}
    for name, m in h.modes.items():
        if m.kind != "ode":
            modes[name] = m
            continue
        x = {v: E.Var(v) for v in m.flow}

        def f(state):
            return {v: E.substitute(e, state) for v, e in m.flow.items()}

        def shift(k, c):
            return {v: x[v] + E.Const(c) * k[v] for v in x}

        k1 = f(x)
        k2 = f(shift(k1, dt / 2))
        k3 = f(shift(k2, dt / 2))
        k4 = f(shift(k3, dt))
        new = {v: x[v] + E.Const(dt / 6) * (k1[v] + 2 * k2[v] + 2 * k3[v] + k4[v]) for v in x}
        modes[name] = Mode(name, "discrete_map", new, m.invariant)
    return HybridAutomaton(list(h.variables), modes, list(h.transitions), h.initial_mode,
                           dict(h.initial_set), list(h.observations), list(h.inputs),
                           name=h.name, source=h.source)


# ---------------------------------------------------------------------------
# Closed loops
# ---------------------------------------------------------------------------


def mountain_car_loop(nn: NeuralNetwork, goal: float = MC_GOAL) -> ClosedLoop:
    return compose_closed_loop(network_to_automaton(nn), mountain_car_model(goal))


def quadrotor_loop(nn: NeuralNetwork, b=(QUAD_B, QUAD_B, QUAD_B), dt: float = QUAD_DT) -> ClosedLoop:
    plant = rk4_discretize(quadrotor_model(None, b), dt)
    return compose_closed_loop(network_to_automaton(nn), plant, actions=QUAD_ACTIONS)


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


def mc_teacher(p, v):
    """Energy pumping: push along the velocity, slightly biased by position."""
    return np.tanh(80.0 * (np.asarray(v) + 0.01 * np.asarray(p)))


QUAD_GAIN = 0.5


def quad_teacher(r) -> np.ndarray:
    """Bang-bang on the sliding variables ``p + QUAD_GAIN * v`` per axis."""
    r = np.atleast_2d(r)
    s = r[:, :3] + QUAD_GAIN * r[:, 3:]
    i_th = (s[:, 0] < 0).astype(int)       # positive theta accelerates +x
    i_ph = (s[:, 1] > 0).astype(int)       # positive phi accelerates -y
    i_ta = (s[:, 2] < 0).astype(int)       # high thrust accelerates +z
    return 4 * i_th + 2 * i_ph + i_ta


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _unpack(theta, dims):
    out, k = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        W = theta[k:k + a * b].reshape(b, a)
        k += a * b
        out.append((W, theta[k:k + b]))
        k += b
    return out


def _act(name, z):
    if name == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return s, s * (1 - s)
    if name == "tanh":
        t = np.tanh(z)
        return t, 1 - t * t
    return z, np.ones_like(z)


def _loss_grad(theta, dims, acts, X, Y, kind, l2):
    params = _unpack(theta, dims)
    hs, ds = [X], []
    for (W, b), a in zip(params, acts):
        h, d = _act(a, hs[-1] @ W.T + b)
        hs.append(h)
        ds.append(d)
    out = hs[-1]
    n = X.shape[0]
    if kind == "mse":
        diff = out - Y
        loss = 0.5 * np.mean(np.sum(diff * diff, axis=1))
        g = diff / n
    else:  # softmax cross-entropy against integer labels
        z = out - out.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), Y] + 1e-300))
        g = p
        g[np.arange(n), Y] -= 1
        g /= n
    grads = []
    for i in range(len(params) - 1, -1, -1):
        g = g * ds[i]
        W, _ = params[i]
        grads.append((g.T @ hs[i] + l2 * W, g.sum(axis=0)))
        loss += 0.5 * l2 * np.sum(W * W)
        g = g @ W
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
    return loss, flat


def fit_network(X, Y, dims, acts, kind="mse", seed=0, scale=None, maxiter=3000, l2=1e-6):
    """L-BFGS fit of a dense network; ``scale`` rescales the first layer's inputs."""
    rng = np.random.default_rng(seed)
    parts = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        W = rng.normal(0.0, 1.0 / math.sqrt(a), (b, a))
        if i == 0 and scale is not None:
            W = W / np.asarray(scale)[None, :]
        parts += [W.ravel(), np.zeros(b)]
    theta0 = np.concatenate(parts)
    res = minimize(_loss_grad, theta0, args=(dims, acts, X, Y, kind, l2), jac=True,
                   method="L-BFGS-B", options={"maxiter": maxiter})
    layers = [Layer(W, b, a) for (W, b), a in zip(_unpack(res.x, dims), acts)]
    return NeuralNetwork(layers), float(res.fun)


def _rounded(nn: NeuralNetwork, digits: int = 6) -> NeuralNetwork:
    """Round every parameter to ``digits`` significant decimals.

    Fixture files then hold short decimals and the loaded network is exactly
    the one that was quality-checked.
    """
    r = np.vectorize(lambda x: float(f"{x:.{digits}g}"))
    layers = [Layer(r(l.W), r(l.b), l.activation) for l in nn.layers]
    return load_network(dump_network(NeuralNetwork(layers)))


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@dataclass
class ControllerFixture:
    name: str
    network: NeuralNetwork
    provenance: str
    scenario: str
    property: str


def mc_quality(nn: NeuralNetwork, n: int = 100, seed: int = 0, steps: int = 200):
    """(solved count, min reward, max steps) over random starts in [-0.6, -0.4]."""
    from .verify import simulate
    loop = mountain_car_loop(nn)
    rng = np.random.default_rng(seed)
    solved, rewards, lens = 0, [], []
    for p0 in rng.uniform(MC_P0.lo, MC_P0.hi, n):
        tr = simulate(loop, {"p": float(p0), "v": 0.0, "r": 0.0}, steps)
        r = tr.states[-1]["r"]
        rewards.append(r)
        lens.append(tr.exit_step or steps)
        solved += tr.exit_step is not None and r >= 90
    return solved, min(rewards), max(lens)


def quad_quality(nn: NeuralNetwork, steps: int = 30, b=(QUAD_B, QUAD_B, QUAD_B)):
    """Largest |position deviation| over ``steps`` from the initial box centre."""
    from .verify import simulate
    loop = quadrotor_loop(nn, b)
    tr = simulate(loop, {v: 0.0 for v in QUAD_VARS}, steps)
    return max(max(abs(s[v]) for v in ("px", "py", "pz")) for s in tr.states)


def _mc_data(rng, n_box=6000):
    # uniform over the state box plus states visited by the teacher
    P = [rng.uniform(-1.2, 0.6, n_box)]
    V = [rng.uniform(-0.07, 0.07, n_box)]
    for p0 in rng.uniform(-0.65, -0.35, 40):
        p, v = p0, 0.0
        for _ in range(150):
            u = float(mc_teacher(p, v))
            P.append(np.array([p]))
            V.append(np.array([v]))
            p, v = p + v, v + 0.0015 * u - 0.0025 * math.cos(3 * p)
            v = min(max(v, -0.07), 0.07)
            p = min(max(p, -1.2), 0.6)
            if p >= MC_GOAL:
                break
    X = np.column_stack([np.concatenate(P), np.concatenate(V)])
    return X, mc_teacher(X[:, 0], X[:, 1])[:, None]


def _quad_data(rng, n=20000):
    X = np.column_stack([rng.uniform(-0.4, 0.4, (n, 3)), rng.uniform(-0.8, 0.8, (n, 3))])
    return X, quad_teacher(X)


def synth_reference_controller(scenario: str, seed: int = 0) -> ControllerFixture:
    """Fit the scenario's reference network to its teacher and check it in simulation."""
    rng = np.random.default_rng(seed)
    if scenario == "mountain_car":
        X, Y = _mc_data(rng)
        nn, loss = fit_network(X, Y, [2, 16, 16, 1], ["sigmoid", "sigmoid", "tanh"],
                               seed=seed, scale=[0.9, 0.07])
        nn = _rounded(nn)
        solved, worst, longest = mc_quality(nn)
        log.info("mountain_car fit loss %.3g: solved %d/100, min reward %.2f, max steps %d",
                 loss, solved, worst, longest)
        if solved < 95:
            raise FixtureQualityFailure(f"mountain_car fixture solves {solved}/100 starts")
        note = (f"least-squares fit (L-BFGS, seed {seed}) of 2-16-16-1 sigmoid/sigmoid/tanh to "
                f"u = tanh(80 (v + 0.01 p)); solves {solved}/100 random starts, min reward {worst:.2f}")
        return ControllerFixture("mountain_car", nn, note, "mountain_car", "reward >= 90")
    if scenario == "quadrotor":
        X, Y = _quad_data(rng)
        nn, loss = fit_network(X, Y, [6, 20, 20, 8], ["tanh", "tanh", "linear"], kind="xent",
                               seed=seed, scale=[0.4] * 3 + [0.8] * 3, maxiter=4000)
        nn = _rounded(nn)
        dev = quad_quality(nn)
        log.info("quadrotor fit loss %.3g: max deviation %.4f", loss, dev)
        if dev > QUAD_BOUND:
            raise FixtureQualityFailure(f"quadrotor fixture deviates {dev:.3f} > {QUAD_BOUND}")
        note = (f"cross-entropy fit (L-BFGS, seed {seed}) of 6-20-20-8 tanh/tanh/linear to the "
                f"bang-bang teacher on p + {QUAD_GAIN} v; max deviation {dev:.4f} over 30 steps "
                f"from the box centre with b = +{QUAD_B}")
        return ControllerFixture("quadrotor", nn, note, "quadrotor", f"|p|_inf <= {QUAD_BOUND}")
    raise ValueError(f"unknown scenario {scenario!r}")


def degrade(nn: NeuralNetwork, scale: float) -> NeuralNetwork:
    """Shrink the output layer so the controller pushes too weakly."""
    layers = list(nn.layers)
    last = layers[-1]
    layers[-1] = Layer(last.W * scale, last.b * scale, last.activation)
    return _rounded(NeuralNetwork(layers))


def fixture_dir() -> str:
    return str(resources.files("nnreach") / "fixtures" / FIXTURE_VERSION)


def fixture_path(name: str) -> str:
    return os.path.join(fixture_dir(), f"{name}.nnet")


def load_fixture(name: str) -> NeuralNetwork:
    with open(fixture_path(name)) as fh:
        return load_network(fh.read())
