"""Forward/backward kernels on raw numpy arrays.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache. Loop nesting is fixed, so results are
bitwise reproducible for a given input on one thread.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

Triple = Tuple[int, int, int]

LOG_CLAMP = 1e-12
ROW_SUM_TOL = 1e-9
COL_BLOCK_ELEMS = 1 << 22


# --- 3D convolution ---


@dataclass
class Conv3dCache:
    padded: np.ndarray
    weights: np.ndarray
    stride: Triple
    padding: Triple
    input_shape: Tuple[int, ...]
    out_spatial: Triple


def conv3d_output_dims(spatial: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]) -> Triple:
    dims = []
    for axis, (n, k, s, p) in enumerate(zip(spatial, kernel, stride, padding)):
        padded = n + 2 * p
        if k > padded:
            raise ShapeError(f"conv3d: kernel size {k} exceeds padded size {padded} on spatial axis {axis}")
        dims.append((padded - k) // s + 1)
    return tuple(dims)  # type: ignore[return-value]


def _blocks(n: int, out: Triple, row_width: int) -> List[Tuple[int, int, int, int]]:
    """(n0, n1, d0, d1) tiles of [samples, output depth] whose im2col matrix stays under COL_BLOCK_ELEMS."""
    do, ho, wo = out
    per_slice = ho * wo * row_width
    if per_slice * do <= COL_BLOCK_ELEMS:
        step = max(1, COL_BLOCK_ELEMS // (per_slice * do))
        return [(i, min(i + step, n), 0, do) for i in range(0, n, step)]
    depth = max(1, COL_BLOCK_ELEMS // per_slice)
    return [(i, i + 1, d, min(d + depth, do)) for i in range(n) for d in range(0, do, depth)]


def _im2col(padded: np.ndarray, kernel: Triple, stride: Triple, out: Triple, d0: int, d1: int) -> np.ndarray:
    """Rows ordered (sample, d, h, w) over output depth d0:d1; columns ordered (channel, kd, kh, kw)."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    _, ho, wo = out
    view = sliding_window_view(padded[:, :, d0 * sd : (d1 - 1) * sd + kd], kernel, axis=(2, 3, 4))
    view = view[:, :, ::sd, ::sh, ::sw][:, :, : d1 - d0, :ho, :wo]
    n, c = view.shape[:2]
    return view.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * (d1 - d0) * ho * wo, c * kd * kh * kw)


def conv3d_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: Triple = (1, 1, 1),
    padding: Triple = (0, 0, 0),
) -> Tuple[np.ndarray, Conv3dCache]:
    """Cross-correlation of x [N,C,D,H,W] with weights [F,C,kd,kh,kw] plus per-filter bias."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be rank 5 [N,C,D,H,W], got rank {x.ndim}")
    if weights.ndim != 5:
        raise ShapeError(f"conv3d: weights must be rank 5 [F,C,kd,kh,kw], got rank {weights.ndim}")
    n, c, d, h, w = x.shape
    f, cw, kd, kh, kw = weights.shape
    if cw != c:
        raise ShapeError(f"conv3d: channel dimension mismatch, input has {c}, weights expect {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv3d: bias dimension {bias.shape} does not match filter count {f}")
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv3d: stride {stride} must be >= 1 on every axis")
    stride, padding = tuple(stride), tuple(padding)
    out = conv3d_output_dims((d, h, w), (kd, kh, kw), stride, padding)
    pd, ph, pw = padding
    padded = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))

    wmat = weights.reshape(f, -1)
    acc = np.empty((n, *out, f), dtype=np.float64)
    for n0, n1, d0, d1 in _blocks(n, out, wmat.shape[1]):
        cols = _im2col(padded[n0:n1], (kd, kh, kw), stride, out, d0, d1)
        acc[n0:n1, d0:d1] = (cols @ wmat.T).reshape(n1 - n0, d1 - d0, out[1], out[2], f)
    acc += bias
    y = np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))
    cache = Conv3dCache(padded, weights, stride, padding, x.shape, out)  # type: ignore[arg-type]
    return y, cache


def conv3d_backward(grad: np.ndarray, cache: Optional[Conv3dCache]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (input_grad, weight_grad, bias_grad)."""
    if cache is None:
        raise ShapeError("conv3d_backward: no cached forward state")
    weights = cache.weights
    f, c, kd, kh, kw = weights.shape
    expected = (cache.input_shape[0], f, *cache.out_spatial)
    if grad.shape != expected:
        raise ShapeError(f"conv3d_backward: upstream gradient shape {grad.shape}, expected {expected}")
    n = grad.shape[0]
    _, ho, wo = cache.out_spatial
    sd, sh, sw = cache.stride
    g_last = np.ascontiguousarray(grad.transpose(0, 2, 3, 4, 1))
    bias_grad = g_last.sum(axis=(0, 1, 2, 3))
    wmat = weights.reshape(f, -1)
    wgrad = np.zeros_like(wmat)
    padded_grad = np.zeros_like(cache.padded)
    for n0, n1, d0, d1 in _blocks(n, cache.out_spatial, wmat.shape[1]):
        g = g_last[n0:n1, d0:d1].reshape(-1, f)
        wgrad += g.T @ _im2col(cache.padded[n0:n1], (kd, kh, kw), cache.stride, cache.out_spatial, d0, d1)
        gcols = (g @ wmat).reshape(n1 - n0, d1 - d0, ho, wo, c, kd, kh, kw)
        # scatter each kernel offset back onto the input positions it read
        for a in range(kd):
            for b in range(kh):
                for cc in range(kw):
                    padded_grad[
                        n0:n1,
                        :,
                        a + d0 * sd : a + (d1 - 1) * sd + 1 : sd,
                        b : b + sh * (ho - 1) + 1 : sh,
                        cc : cc + sw * (wo - 1) + 1 : sw,
                    ] += gcols[..., a, b, cc].transpose(0, 4, 1, 2, 3)
    _, _, d, h, w = cache.input_shape
    pd, ph, pw = cache.padding
    input_grad = np.ascontiguousarray(padded_grad[:, :, pd : pd + d, ph : ph + h, pw : pw + w])
    return input_grad, wgrad.reshape(weights.shape), bias_grad


# --- elementwise ---


def leaky_relu_forward(x: np.ndarray, slope: float) -> Tuple[np.ndarray, np.ndarray]:
    mask = x >= 0
    return np.where(mask, x, slope * x), mask


def leaky_relu_backward(grad: np.ndarray, mask: np.ndarray, slope: float) -> np.ndarray:
    return np.where(mask, grad, slope * grad)


def sigmoid_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # tanh form is stable for large |x| and exact at 0
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return s, s


def sigmoid_backward(grad: np.ndarray, s: np.ndarray) -> np.ndarray:
    return grad * s * (1.0 - s)


# --- pooling ---


def global_pool_forward(x: np.ndarray, mode: str) -> Tuple[np.ndarray, Tuple[str, Tuple[int, ...], Optional[np.ndarray]]]:
    if x.ndim < 3:
        raise ShapeError(f"global_pool: need [N,C,spatial...], got shape {x.shape}")
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    if flat.shape[2] < 1:
        raise ShapeError("global_pool: spatial size must be >= 1")
    if mode == "max":
        # first argmax in scan order
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        return out, (mode, x.shape, arg)
    if mode == "avg":
        return flat.mean(axis=2), (mode, x.shape, None)
    raise ValueError(f"global_pool: unknown mode {mode!r}")


def global_pool_backward(grad: np.ndarray, cache) -> np.ndarray:
    mode, shape, arg = cache
    n, c = shape[:2]
    spatial = int(np.prod(shape[2:]))
    if mode == "max":
        out = np.zeros((n, c, spatial), dtype=np.float64)
        np.put_along_axis(out, arg[:, :, None], grad[:, :, None], axis=2)
        return out.reshape(shape)
    out = np.broadcast_to((grad / spatial)[:, :, None], (n, c, spatial))
    return np.ascontiguousarray(out).reshape(shape)


# --- dense ---


def fully_connected_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """x [N, in] @ weights [in, out] + bias [out]."""
    if x.ndim != 2:
        raise ShapeError(f"fully_connected: input must be [N, in], got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeError(f"fully_connected: input width {x.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match output width {weights.shape[1]}")
    return x @ weights + bias, (x, weights)


def fully_connected_backward(grad: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weights = cache
    return grad @ weights.T, x.T @ grad, grad.sum(axis=0)


def softmax_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if x.ndim != 2:
        raise ShapeError(f"softmax: input must be [N, K], got shape {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax_backward(grad: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (grad - (grad * p).sum(axis=1, keepdims=True))


# --- structural ---


def concat_forward(xs: Sequence[np.ndarray], axis: int = 1) -> Tuple[np.ndarray, List[int]]:
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    widths = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), widths


def concat_backward(grad: np.ndarray, widths: List[int], axis: int = 1) -> List[np.ndarray]:
    cuts = np.cumsum(widths)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=axis)]


def multiply_broadcast_forward(gate: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """gate [N,C] times x [N,C,...], broadcast over spatial dims."""
    if gate.ndim != 2 or x.shape[:2] != gate.shape:
        raise ShapeError(f"multiply_broadcast: gate {gate.shape} does not match leading dims of {x.shape}")
    g = gate.reshape(gate.shape + (1,) * (x.ndim - 2))
    return x * g, (gate, x)


def multiply_broadcast_backward(grad: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
    gate, x = cache
    g = gate.reshape(gate.shape + (1,) * (x.ndim - 2))
    spatial = tuple(range(2, x.ndim))
    return (grad * x).sum(axis=spatial), grad * g


# --- loss ---


def cross_entropy_forward(probs: np.ndarray, targets: np.ndarray) -> Tuple[float, Tuple[np.ndarray, np.ndarray]]:
    """Mean over the batch of -sum(target * log(prob)), log clamped at 1e-12."""
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ShapeError(f"cross_entropy: probs {probs.shape} and targets {targets.shape} must both be [N, K]")
    sums = probs.sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > ROW_SUM_TOL:
        raise ShapeError(f"cross_entropy: probability rows must sum to 1 (max deviation {worst:.3e})")
    clamped = np.maximum(probs, LOG_CLAMP)
    loss = float(-(targets * np.log(clamped)).sum() / probs.shape[0])
    return loss, (probs, targets)


def cross_entropy_backward(grad: float, cache) -> np.ndarray:
    probs, targets = cache
    return -targets / np.maximum(probs, LOG_CLAMP) * (grad / probs.shape[0])
