"""Minimal reverse-mode autodiff and the handful of layers the angle model needs.

Tensors wrap float64 numpy arrays. Each op records a backward closure that
pushes the output gradient into its parents; :meth:`Tensor.backward` walks
the graph in reverse topological order. Only parameters (and things computed
from them) carry gradients; model inputs are plain constants.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True
_lstm_backward_sign = 1.0


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_lstm_backward_fault():
    """Flip the sign of one LSTM backward term. Test-only mutation hook."""
    global _lstm_backward_sign
    prev, _lstm_backward_sign = _lstm_backward_sign, -1.0
    try:
        yield
    finally:
        _lstm_backward_sign = prev


def _finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self.requires_grad:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar tensor")
        order, seen = [], set()

        def visit(t):
            # iterative DFS; LSTM graphs are shallow but FC chains can be long
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: tuple, backward: Callable, where: str) -> Tensor:
    _finite(data, where)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def constant(a) -> Tensor:
    return Tensor(a)


# -- layers -----------------------------------------------------------------

def fc_forward(x: Tensor, weights: Tensor, bias: Tensor, activation: str = "identity") -> Tensor:
    """``act(x @ W + b)`` for x [B x I], W [I x O], b [O]."""
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    if x.data.ndim != 2 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("fc_forward expects x [B x I], W [I x O], b [O]")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ShapeError(f"fc shapes do not conform: {x.shape} @ {weights.shape} + {bias.shape}")
    pre = x.data @ weights.data + bias.data
    out = np.maximum(pre, 0.0) if activation == "relu" else pre

    def backward(g):
        if activation == "relu":
            g = g * (pre > 0)
        if weights.requires_grad:
            weights.grad += x.data.T @ g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if x.requires_grad:
            x.grad += g @ weights.data.T

    return _result(out, (x, weights, bias), backward, "fc_forward")


def concat(parts: list[Tensor]) -> Tensor:
    """Column-wise concatenation of [B x K_i] tensors, in the given order."""
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    batch = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != batch:
            raise ShapeError("concat parts must be 2-D with equal batch size")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.grad += g[:, lo:hi]

    return _result(out, tuple(parts), backward, "concat")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = np.array(np.mean(diff * diff))

    def backward(g):
        pred._accumulate(g * 2.0 * diff / diff.size)

    return _result(out, (pred,), backward, "mse_loss")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _result(np.array(x.data.sum()), (x,), backward, "sum_all")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_forward(seq, w_x: Tensor, w_h: Tensor, b: Tensor, hidden_size: int) -> Tensor:
    """Single-layer LSTM over ``seq`` [B x T x C]; returns the last hidden state [B x H].

    Gate layout along the 4H axis is (input, forget, candidate, output).
    Initial hidden and cell state are zero.
    """
    x = seq.data if isinstance(seq, Tensor) else np.asarray(seq, dtype=np.float64)
    H = hidden_size
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"lstm input must be B x T x C with T >= 1, got {x.shape}")
    B, T, C = x.shape
    if w_x.shape != (C, 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm parameter shapes do not match C={C}, H={H}")

    xw = (x.reshape(B * T, C) @ w_x.data).reshape(B, T, 4 * H) + b.data
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs, cs, gates = [h], [c], []
    for t in range(T):
        z = xw[:, t] + h @ w_h.data
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
        cs.append(c)
        gates.append((i, f, g, o))

    def backward(gh):
        sign = _lstm_backward_sign
        dWx = np.zeros_like(w_x.data)
        dWh = np.zeros_like(w_h.data)
        db = np.zeros_like(b.data)
        dh = gh.copy()
        dc = np.zeros((B, H))
        dz = np.empty((B, 4 * H))
        for t in range(T - 1, -1, -1):
            i, f, g, o = gates[t]
            tc = np.tanh(cs[t + 1])
            dc = dc + dh * o * (1.0 - tc * tc)
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = sign * dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dWx += x[:, t].T @ dz
            dWh += hs[t].T @ dz
            db += dz.sum(axis=0)
            dh = dz @ w_h.data.T
            dc = dc * f
        w_x._accumulate(dWx)
        w_h._accumulate(dWh)
        b._accumulate(db)

    return _result(h, (w_x, w_h, b), backward, "lstm_forward")


# -- parameters and optimisation ---------------------------------------------

@dataclass
class ParamStore:
    """Named parameters plus Adam moment buffers. Iteration is sorted by name."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, self.params[k]) for k in self.names())

    def zero_grad(self):
        for t in self.params.values():
            t.grad[...] = 0.0

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(store: ParamStore, lr: float) -> ParamStore:
    """One bias-corrected Adam update, then gradients are zeroed."""
    store.step += 1
    t = store.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        _finite(p.data, f"adam update of {name}")
        g[...] = 0.0
    return store


LR_START, LR_END, LR_DECAY_STEPS = 0.003, 0.0003, 10_000


def lr_schedule(step: int) -> float:
    """0.003 decaying log-linearly to 0.0003 over 10000 steps, flat afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step, LR_DECAY_STEPS) / LR_DECAY_STEPS
    return LR_START * (LR_END / LR_START) ** frac


# -- verification -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradient_check(loss_fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
                   floor: float = 1e-6, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    gradients that are zero up to round-off from dominating the report.
    """
    store.zero_grad()
    loss = loss_fn()
    _finite(loss.data, "gradient_check loss")
    loss.backward()
    analytic = {k: store[k].grad.copy() for k in store.names()}
    store.zero_grad()

    worst = GradCheckReport(0.0, "", (), 0.0, 0.0, 0)
    checked = 0
    with no_grad():
        for name in (names or store.names()):
            p = store[name].data
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = float(loss_fn().data)
                p[idx] = orig - h
                down = float(loss_fn().data)
                p[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"non-finite loss while perturbing {name}{idx}")
                num = (up - down) / (2.0 * h)
                ana = float(analytic[name][idx])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                checked += 1
                if rel > worst.max_rel_error or not worst.worst_param:
                    worst = GradCheckReport(rel, name, idx, ana, num, 0)
    worst.checked = checked
    return worst
