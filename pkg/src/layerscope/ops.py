"""Forward/backward kernels for the layer types used by the VGG-style nets.

Every kernel works on float64 numpy arrays in NCHW layout and is a pure
function: the forward returns ``(output, cache)`` and the matching backward
consumes the cache. Randomness (dropout) comes in only through an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the kernel."""


@dataclass
class ParamTensor:
    """A trainable array together with its gradient and freeze flag."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    frozen: bool = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.value.copy(), self.grad.copy(), self.frozen)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 1):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,k,k) plus bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError(f"input has {c} channels but kernels expect {kc}")
    if b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} filters")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"padded input {h + 2 * pad}x{wd + 2 * pad} smaller than kernel {kh}x{kw}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # rows are output pixels, columns are (C, kh, kw) patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    cache = (x.shape, w, cols, stride, pad)
    return out, cache


def conv2d_backward(grad_out, cache, need_input: bool = True):
    """Returns ``(grad_input, grad_kernels, grad_bias)``; grad_input is None when not needed."""
    (n, c, h, wd), w, cols, stride, pad = cache
    f, _, kh, kw = w.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    if not need_input:
        return None, grad_w, grad_b

    gcols = g @ w.reshape(f, -1)
    gx = _col2im(gcols, n, c, h, wd, kh, kw, stride, pad, ho, wo)
    return gx, grad_w, grad_b


@numba.njit(cache=True)
def _col2im(gcols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    # scatter-add of patch gradients back onto the (unpadded) input grid
    gx = np.zeros((n, c, h, w))
    for ni in range(n):
        for oi in range(ho):
            for oj in range(wo):
                row = (ni * ho + oi) * wo + oj
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        r = oi * stride + i - pad
                        for j in range(kw):
                            s = oj * stride + j - pad
                            if 0 <= r < h and 0 <= s < w:
                                gx[ni, ci, r, s] += gcols[row, col]
                            col += 1
    return gx


# ---------------------------------------------------------------------------
# max pooling


def maxpool2d_forward(x, size: int = 2, stride: int = 2):
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"input {h}x{w} smaller than pooling window {size}x{size}")
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, size * size)
    # argmax returns the first hit, i.e. row-major tie-break inside the window
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg, size, stride)


def maxpool2d_backward(grad_out, cache):
    shape, arg, size, stride = cache
    ho, wo = arg.shape[2], arg.shape[3]
    gx = np.zeros(shape, dtype=DTYPE)
    for idx in range(size * size):
        i, j = divmod(idx, size)
        gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, grad_out, 0.0)
    return gx


# ---------------------------------------------------------------------------
# dense / activations


def fc_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully connected: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} units")
    return x @ w + b, (x, w)


def fc_backward(grad_out, cache, need_input: bool = True):
    x, w = cache
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w.T if need_input else None
    return grad_x, grad_w, grad_b


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out, mask):
    # subgradient at exactly 0 is 0
    return np.where(mask, grad_out, 0.0)


def dropout_forward(x, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Eval mode and ``rate == 0`` are the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return np.where(keep, x * scale, 0.0), (keep, scale)


def dropout_backward(grad_out, cache):
    if cache is None:
        return grad_out
    keep, scale = cache
    return np.where(keep, grad_out * scale, 0.0)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_per_example(logits, labels):
    """Per-row ``-log softmax(logits)[label]`` computed with max subtraction."""
    labels = _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and the softmax probabilities."""
    losses = cross_entropy_per_example(logits, labels)
    return float(losses.mean()), softmax(logits)


def softmax_cross_entropy_backward(probs, labels):
    labels = np.asarray(labels)
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def _check_labels(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Sequence[np.ndarray]],
    arrays: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    num_samples: int | None = 30,
    rng: np.random.Generator | None = None,
    exclude: Callable[[int, tuple], bool] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward(*arrays)`` returns an array or a scalar. The scalar probe is
    ``sum(forward(*arrays) * R)`` for a fixed random ``R``; ``backward(R, *arrays)``
    must return one gradient per entry of ``arrays``. Coordinates are sampled
    (``num_samples`` per array, all of them when None) and compared with
    ``|analytic - numeric| / max(1, |analytic|)``. ``exclude(array_index, coord)``
    can veto probe points, e.g. near a ReLU kink.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    out = np.asarray(forward(*arrays), dtype=DTYPE)
    proj = rng.standard_normal(out.shape) if out.ndim else np.array(1.0)

    def probe():
        return float(np.sum(np.asarray(forward(*arrays), dtype=DTYPE) * proj))

    grads = backward(proj, *arrays)
    worst = 0.0
    for ai, (a, g) in enumerate(zip(arrays, grads)):
        if g is None:
            continue
        coords = list(np.ndindex(a.shape))
        if num_samples is not None and len(coords) > num_samples:
            picks = rng.choice(len(coords), size=num_samples, replace=False)
            coords = [coords[p] for p in picks]
        for idx in coords:
            if exclude is not None and exclude(ai, idx):
                continue
            orig = a[idx]
            a[idx] = orig + epsilon
            up = probe()
            a[idx] = orig - epsilon
            down = probe()
            a[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(g[idx])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
