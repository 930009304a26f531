from __future__ import annotations

from typing import Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, from_op


def conv3d(x: Tensor, weights: Tensor, bias: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    y, cache = F.conv3d_forward(x.data, weights.data, bias.data, tuple(stride), tuple(padding))

    def backward(g):
        return F.conv3d_backward(g, cache)

    return from_op(y, (x, weights, bias), "conv3d", backward)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    y, mask = F.leaky_relu_forward(x.data, slope)
    out = from_op(y, (x,), "leaky_relu", lambda g: (F.leaky_relu_backward(g, mask, slope),))
    out.signature = mask
    return out


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def global_pool(x: Tensor, mode: str) -> Tensor:
    y, cache = F.global_pool_forward(x.data, mode)
    out = from_op(y, (x,), f"global_{mode}_pool", lambda g: (F.global_pool_backward(g, cache),))
    if mode == "max":
        out.signature = cache[2]
    return out


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    y, cache = F.fully_connected_forward(x.data, weights.data, bias.data)
    return from_op(y, (x, weights, bias), "fully_connected", lambda g: F.fully_connected_backward(g, cache))


def sigmoid(x: Tensor) -> Tensor:
    y, s = F.sigmoid_forward(x.data)
    return from_op(y, (x,), "sigmoid", lambda g: (F.sigmoid_backward(g, s),))


def softmax(x: Tensor) -> Tensor:
    y, p = F.softmax_forward(x.data)
    return from_op(y, (x,), "softmax", lambda g: (F.softmax_backward(g, p),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    y, widths = F.concat_forward([t.data for t in xs], axis)
    return from_op(y, tuple(xs), "concat", lambda g: F.concat_backward(g, widths, axis))


def multiply_broadcast(gate: Tensor, x: Tensor) -> Tensor:
    y, cache = F.multiply_broadcast_forward(gate.data, x.data)
    return from_op(y, (gate, x), "multiply", lambda g: F.multiply_broadcast_backward(g, cache))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    y = x.data.reshape(shape[0], -1)
    return from_op(y, (x,), "flatten", lambda g: (g.reshape(shape),))


def cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=np.float64)
    loss, cache = F.cross_entropy_forward(probs.data, targets)
    return from_op(np.array(loss), (probs,), "cross_entropy", lambda g: (F.cross_entropy_backward(g.item(), cache),))


def one_hot(indices: Sequence[int], num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.size, num_classes), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out
