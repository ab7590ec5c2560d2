"""Dense float64 primitives with tape-based reverse-mode gradients.

Every op takes :class:`Tensor` (or plain arrays, treated as constants) and
returns a :class:`Tensor`. When at least one input is tracked, the op pushes
a backward rule onto the owning :class:`Tape`; ``Tape.backward`` then walks
the rules in reverse and leaves a ``.grad`` on every tracked tensor.

Leading axes broadcast like numpy, so the same code path serves single
sequences (T x n) and batches (B x T x n).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, StateError

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value, requires_grad=False, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        flag = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.value.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out, inputs, rule):
        self.out = out
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Records differentiable ops for one forward pass.

    A tape is single use: after :meth:`backward` its records are dropped and
    a second call raises :class:`StateError`.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def leaf(self, value, requires_grad=True) -> Tensor:
        return Tensor(value, requires_grad=requires_grad, tape=self)

    def watch(self, t: Tensor) -> Tensor:
        """Start tracking ``t`` so ops downstream of it are recorded."""
        t.requires_grad = True
        t.tape = self
        return t

    def record(self, out: Tensor, inputs, rule) -> None:
        if self._consumed:
            raise StateError("tape already consumed by backward(); re-run forward")
        self._nodes.append(_Node(out, inputs, rule))

    def backward(self, output: Tensor) -> None:
        if self._consumed:
            raise StateError("backward() called twice without a new forward pass")
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.value.shape}")
        if not output.requires_grad:
            raise StateError("output does not depend on any tracked tensor")
        output.grad = np.ones_like(output.value)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            parent_grads = node.rule(g)
            for inp, pg in zip(node.inputs, parent_grads):
                if pg is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = pg
                else:
                    inp.grad = inp.grad + pg
        self._nodes.clear()
        self._consumed = True

    def __len__(self):
        return len(self._nodes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out_value, inputs, rule) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad:
            tape = t.tape
            break
    if tape is None:
        return Tensor(out_value)
    out = Tensor(out_value, requires_grad=True, tape=tape)
    tape.record(out, inputs, rule)
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _track(av @ bv, (a, b), rule)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _track(a.value + b.value, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _track(a.value - b.value, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _track(av * bv, (a, b),
                  lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = _wrap(a)
    shape = a.value.shape
    return _track(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return _track(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = _wrap(a)
    return _track(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``getitem(x, (slice(None), 0))``."""
    a = _wrap(a)
    shape = a.value.shape

    def rule(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _track(a.value[key], (a,), rule)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.value.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _track(table.value[ids], (table,), rule)


def softmax_rows(m, scale: float = 1.0, key_mask=None) -> Tensor:
    """Row softmax of ``scale * m`` with row-max subtraction.

    ``key_mask`` (bool, broadcastable to ``m``) marks admissible columns;
    masked columns get exactly zero probability. Every row must keep at
    least one admissible column.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    m = _wrap(m)
    z = m.value * scale
    if key_mask is not None:
        z = np.where(key_mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (scale * y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _track(y, (m,), rule)


def layernorm(m, gain, bias, eps: float = LAYERNORM_EPS) -> Tensor:
    m, gain, bias = _wrap(m), _wrap(gain), _wrap(bias)
    x = m.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def rule(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx,
                unbroadcast(g * xhat, gv.shape) if gain.requires_grad else None,
                unbroadcast(g, bias.value.shape) if bias.requires_grad else None)

    return _track(xhat * gv + bias.value, (m, gain, bias), rule)


def gelu(m) -> Tensor:
    """Tanh-approximation GELU."""
    m = _wrap(m)
    x = m.value
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _track(0.5 * x * (1.0 + t), (m,), rule)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``B x C`` logits against integer labels."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / len(labels),)

    return _track(np.asarray(loss), (logits,), rule)
