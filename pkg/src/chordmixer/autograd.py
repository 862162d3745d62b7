"""Dense float64 tensors with reverse-mode differentiation.

Just enough of an autograd engine to train a rotation-mixing network:
matrix products, GELU, dropout, column means, the two losses, and Adam.
Everything is numpy-backed, deterministic given the inputs and seeds,
and runs in 64-bit (finite-difference checks need the headroom).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense row-major float64 array plus reverse-mode bookkeeping.

    Leaf tensors created with ``requires_grad=True`` accumulate into
    ``.grad`` when ``backward()`` is called on a downstream scalar.
    Interior nodes are produced by the operations in this module and
    carry a closure that routes gradients to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar node through the whole graph.

        Visits every node exactly once, in reverse topological order,
        summing gradients where a node feeds several consumers.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    """Build an op output; the graph is pruned where no parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to an operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def neg(a):
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def matmul(a, b):
    """Matrix product for (m,k)@(k,n) and (m,k)@(k,) operands."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul supports 2-d @ 1-d/2-d, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 2:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        else:
            if a.requires_grad:
                _accumulate(a, np.outer(g, b.data))
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def gelu(x):
    """Exact Gaussian-CDF GELU, x * Phi(x), with its analytic derivative."""
    x = _lift(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            _accumulate(x, g * (cdf + x.data * pdf))

    return _node(out_data, (x,), backward)


def dropout(x, rate, rng, training):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    At inference (``training=False``) this is the identity, so no
    recalibration is ever needed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _lift(x)
    if not training or rate == 0.0:
        return x
    keep = rng.gen.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out_data = x.data * mask

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _node(out_data, (x,), backward)


def mean_over_positions(x):
    """Mean over the position axis: (d, N) -> (d,)."""
    x = _lift(x)
    if x.data.ndim != 2:
        raise ValueError(f"expected a d x N matrix, got shape {x.shape}")
    n = x.shape[1]
    out_data = x.data.mean(axis=1)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.repeat(g[:, None] / n, n, axis=1))

    return _node(out_data, (x,), backward)


def tensor_sum(x):
    x = _lift(x)
    out_data = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(out_data, (x,), backward)


def concat_columns(tensors):
    """Concatenate (d, N_i) tensors along the position axis."""
    tensors = [_lift(t) for t in tensors]
    d = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != d:
            raise ValueError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    widths = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, g[:, lo:hi])

    return _node(out_data, tuple(tensors), backward)


def take_columns(x, start, stop):
    """Slice columns [start, stop) of a (d, N) tensor."""
    x = _lift(x)
    out_data = x.data[:, start:stop].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _accumulate(x, full)

    return _node(out_data, (x,), backward)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out_data = np.asarray(np.mean(diff * diff))

    def backward(g):
        scale = 2.0 / diff.size
        if pred.requires_grad:
            _accumulate(pred, g * scale * diff)
        if target.requires_grad:
            _accumulate(target, -g * scale * diff)

    return _node(out_data, (pred, target), backward)


def weighted_cross_entropy(logits, label, class_weights):
    """-w[label] * log softmax(logits)[label], stabilized by subtracting the max logit.

    ``class_weights`` is treated as a constant; no gradient flows to it.
    """
    logits = _lift(logits)
    if logits.data.ndim != 1:
        raise ValueError(f"logits must be a vector, got shape {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    weights = class_weights.data if isinstance(class_weights, Tensor) else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ValueError(f"class_weights shape {weights.shape} does not match {n_classes} classes")

    shifted = logits.data - logits.data.max()
    log_z = np.log(np.exp(shifted).sum())
    w = weights[label]
    out_data = np.asarray(-w * (shifted[label] - log_z))

    def backward(g):
        if logits.requires_grad:
            softmax = np.exp(shifted - log_z)
            grad = w * softmax
            grad[label] -= w
            _accumulate(logits, g * grad)

    return _node(out_data, (logits,), backward)


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, applied to numpy arrays in place.

    The step counter advances once per call regardless of how many
    parameter arrays are updated.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have matching lengths")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class Adam:
    """Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.for_params([p.data for p in self.params])

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def global_grad_norm(params):
    """L2 norm over every gradient element; None gradients count as zero."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return np.sqrt(total)


def clip_gradients(params, max_norm):
    """Scale all gradients down so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Rng:
    """Seeded PCG64 stream with derivable, independent child streams.

    The generator is numpy's PCG64 keyed by a SeedSequence over
    ``[seed, *path]``, so the same seed yields the same stream on any
    platform, and ``split()`` children never overlap their parent.
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = seed
        self._path = tuple(_path)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, *self._path])))

    def split(self, *keys):
        """Derive a child stream; keys are ints or strings (crc32-hashed)."""
        path = self._path + tuple(_key_to_int(k) for k in keys)
        return Rng(self.seed, path)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def _key_to_int(key):
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError("stream keys must be non-negative")
    return key
