"""Fully connected ReLU network over a flat parameter vector.

Parameters are laid out layer by layer: the weight matrix of layer ``l``
(``out x in``, row-major) followed by its bias.
"""
from __future__ import annotations

import numpy as np

from .numcore import ContractError, Tensor, affine, getitem, relu, reshape


def layer_shapes(layer_spec):
    """``[(out, in), ...]`` for ``layer_spec = [in, hidden..., out]``."""
    if len(layer_spec) < 2 or any(int(s) <= 0 for s in layer_spec):
        raise ContractError(f"layer_spec needs at least two positive sizes, got {layer_spec}")
    return [(int(o), int(i)) for i, o in zip(layer_spec[:-1], layer_spec[1:])]


def n_params(layer_spec):
    return sum(o * i + o for o, i in layer_shapes(layer_spec))


def _offsets(layer_spec):
    pos = 0
    for o, i in layer_shapes(layer_spec):
        yield (o, i), pos, pos + o * i, pos + o * i + o
        pos += o * i + o


def forward(theta, layer_spec, x, head=None, head_size=None):
    """Logits of the network.

    ``theta`` is ``(P,)`` or ``(S, P)`` (one row per posterior sample); ``x``
    is ``(N, D)`` or ``(D,)``. The output is ``(S, N, C)``/``(N, C)``. With
    ``head`` set, only output units ``head*head_size:(head+1)*head_size``
    are returned (multi-head protocol).
    """
    lead = theta.shape[:-1]
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    shapes = list(_offsets(layer_spec))
    for idx, ((o, i), a, b, c) in enumerate(shapes):
        W = reshape(getitem(theta, (..., slice(a, b))), lead + (o, i))
        bias = getitem(theta, (..., slice(b, c)))
        h = affine(W, bias, h)
        if idx < len(shapes) - 1:
            h = relu(h)
    if head is not None:
        h = getitem(h, (..., slice(head * head_size, (head + 1) * head_size)))
    return h
