"""Dense float64 arrays, a reverse-mode gradient tape and a seeded RNG.

Every op takes and returns :class:`Tensor`. When a :class:`GradTape` is
active and at least one input requires a gradient, the op appends its output
node to the tape together with a vector-Jacobian product closure.
:func:`backward` replays the tape in exact reverse order.

>>> with GradTape() as tape:
...     x = tape.watch(np.array(3.0))
...     y = x * x
>>> backward(tape, y)[x]
array(6.)
"""
from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "ContractError", "DimensionError", "NumericError",
    "Tensor", "GradTape", "SeededRng", "current_tape", "record", "backward",
    "as_tensor", "add", "sub", "mul", "neg", "exp", "log", "relu", "softplus",
    "reduce_sum", "reduce_mean", "reshape", "getitem", "affine", "softmax_xent",
]


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or consumed."""


_TAPES: list["GradTape"] = []


def current_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "vjp", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


class GradTape:
    """Ordered record of the differentiable ops executed inside the context."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._watched: dict[int, Tensor] = {}
        self._keepalive: list = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, array, name=None):
        """Leaf tensor for ``array``; watching the same array twice returns the same leaf."""
        key = id(array)
        leaf = self._watched.get(key)
        if leaf is None:
            leaf = Tensor(array, requires_grad=True, name=name)
            self._watched[key] = leaf
            self._keepalive.append(array)
        return leaf

    @property
    def leaves(self):
        return list(self._watched.values())


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(value, parents, vjp):
    """Wrap ``value`` as an op output, recording it when a tape is active.

    ``vjp(g)`` must return one entry per parent: an array shaped like that
    parent, ``None``, or an ``(index, array)`` pair for a basic-slice update.
    """
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape.nodes.append(out)
    return out


def _accumulate(adj, owned, node, g):
    key = id(node)
    if isinstance(g, tuple):
        index, part = g
        if key not in adj:
            adj[key] = np.zeros(node.shape)
            owned.add(key)
        elif key not in owned:
            adj[key] = adj[key].copy()
            owned.add(key)
        adj[key][index] += part
        return
    if key not in adj:
        adj[key] = g
    elif key in owned:
        adj[key] += g
    else:
        adj[key] = adj[key] + g
        owned.add(key)


def backward(tape, loss):
    """Reverse-mode sweep from scalar ``loss``.

    Returns a dict mapping every watched leaf (and any other gradient-requiring
    leaf reached) to its gradient. Leaves not on a path to ``loss`` get zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj = {id(loss): np.ones_like(loss.value)}
    owned: set[int] = set()
    reached: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            _accumulate(adj, owned, parent, pg)
            if parent.vjp is None:
                reached[id(parent)] = parent
    grads = {}
    for leaf in list(tape.leaves) + list(reached.values()):
        g = adj.get(id(leaf))
        grads[leaf] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    return grads


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                             _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def neg(a):
    a = as_tensor(a)
    return record(-a.value, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    return record(np.log(av), (a,), lambda g: (g / av,))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0.0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    av = a.value
    return record(kernels.softplus(av), (a,), lambda g: (g * kernels.sigmoid(av),))


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return record(a.value.sum(axis=axis), (a,), vjp)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index):
    """Basic (slice/integer) indexing only."""
    a = as_tensor(a)
    return record(a.value[index], (a,), lambda g: ((index, g),))


def affine(W, b, x):
    """``y_i = sum_j W_ij x_j + b_i``, batched.

    ``W`` is ``(..., m, k)``, ``b`` is ``(..., m)`` and ``x`` is ``(k,)`` or
    ``(..., N, k)``; leading dimensions broadcast (e.g. one weight sample per
    Monte-Carlo draw against a shared input batch).
    """
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.ndim < 2 or x.ndim < 1 or b.ndim < 1:
        raise DimensionError("affine needs W with ndim>=2, b and x with ndim>=1")
    m, k = W.shape[-2:]
    if x.shape[-1] != k or b.shape[-1] != m:
        raise DimensionError(f"affine: W {W.shape}, b {b.shape}, x {x.shape} do not conform")
    vector = x.ndim == 1
    xv = x.value[None, :] if vector else x.value
    Wv, bv = W.value, b.value
    Wt = np.swapaxes(Wv, -1, -2)
    y = np.matmul(xv, Wt) + bv[..., None, :]
    if vector:
        y = y[..., 0, :]

    def vjp(g):
        gm = g[..., None, :] if vector else g
        gW = gb = gx = None
        if W.requires_grad:
            gW = _unbroadcast(np.matmul(np.swapaxes(gm, -1, -2), xv), W.shape)
        if b.requires_grad:
            gb = _unbroadcast(gm.sum(axis=-2), b.shape)
        if x.requires_grad:
            gx = np.matmul(gm, Wv)
            gx = _unbroadcast(gx[..., 0, :] if vector else gx, x.shape)
        return gW, gb, gx

    return record(y, (W, b, x), vjp)


def softmax_xent(logits, labels):
    """Per-example cross-entropy ``-log softmax(logits)[label]``.

    ``logits`` is ``(..., C)`` (``(..., N, C)`` for a batch) and ``labels``
    is an int or an ``(N,)`` int array. Returns ``(loss, probs)`` where
    ``loss`` is a Tensor shaped like ``logits`` minus its last axis and
    ``probs`` is a plain array.
    """
    logits = as_tensor(logits)
    z = logits.value
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_xent received non-finite logits")
    C = z.shape[-1]
    if C < 2:
        raise ContractError("softmax_xent needs at least two classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range for {C} classes")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    probs = e / total
    logp = shifted - np.log(total)
    onehot = np.zeros(z.shape[-2:] if z.ndim >= 2 and labels.ndim == 1 else (C,))
    if labels.ndim == 0:
        onehot[int(labels)] = 1.0
    else:
        onehot[np.arange(labels.shape[0]), labels] = 1.0
    loss = -(logp * onehot).sum(axis=-1)
    return record(loss, (logits,), lambda g: (g[..., None] * (probs - onehot),)), probs


class SeededRng:
    """Seeded stream: PCG64 bit generator, NumPy ``Generator`` transforms.

    Normals come from NumPy's ziggurat transform of the PCG64 stream; both
    are fixed by NumPy's stream-compatibility policy, so a seed gives the
    same draws on every platform.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys):
        """Independent stream derived from this seed and integer ``keys``."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return SeededRng(int(ss.generate_state(1, np.uint64)[0]))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)
