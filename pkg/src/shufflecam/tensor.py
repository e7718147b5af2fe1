"""Dense float64 tensor ops with hand-written backward passes.

Every array here is a plain ``numpy.ndarray`` of dtype float64 in row-major
layout.  Forward functions are pure; backward functions take the forward
inputs again rather than relying on hidden caches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


def _output_extent(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {axis} extent {k} exceeds padded input extent {size + 2 * pad}")
    if span % stride:
        raise ValueError(
            f"non-integer output {axis}: ({size} + 2*{pad} - {k}) / {stride} is not whole"
        )
    return span // stride + 1


def _check_conv_shapes(x, kernel, bias, stride):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[0]} filters")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _output_extent(h, kh, stride, pad, "height")
    wo = _output_extent(w, kw, stride, pad, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) -> rows are output pixels, columns are taps
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N,C,H,W) with ``kernel`` (K,C,kh,kw); returns (N,K,H',W')."""
    return conv2d_with_cols(x, kernel, bias, stride, pad)[0]


def conv2d_with_cols(x, kernel, bias, stride=1, pad=0):
    """:func:`conv2d` that also returns the im2col matrix for reuse in backward."""
    _check_conv_shapes(x, kernel, bias, stride)
    k, _, kh, kw = kernel.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ kernel.reshape(k, -1).T + bias
    return out.reshape(x.shape[0], ho, wo, k).transpose(0, 3, 1, 2), cols


def conv2d_backward(x, kernel, upstream, stride: int = 1, pad: int = 0, cols=None, need_input: bool = True):
    """Gradients of ``sum(upstream * conv2d(x, kernel, b))``.

    Returns ``(grad_input, grad_kernel, grad_bias)``; ``grad_input`` is None
    when ``need_input`` is false.  ``cols`` may pass the im2col matrix from
    :func:`conv2d_with_cols`.
    """
    _check_conv_shapes(x, kernel, None, stride)
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    ho = _output_extent(h, kh, stride, pad, "height")
    wo = _output_extent(w, kw, stride, pad, "width")
    if upstream.shape != (n, k, ho, wo):
        raise ValueError(f"upstream grad shape {upstream.shape} != conv output {(n, k, ho, wo)}")
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad)[0]
    g = upstream.transpose(0, 2, 3, 1).reshape(-1, k)
    grad_kernel = (g.T @ cols).reshape(kernel.shape)
    grad_bias = g.sum(axis=0)
    if not need_input:
        return None, grad_kernel, grad_bias

    # (C*kh*kw, N*Ho*Wo) so each tap's slab is a contiguous (C, N, Ho, Wo) block
    wmat = kernel.reshape(k, c, kh, kw).transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
    g_cn = upstream.transpose(1, 0, 2, 3).reshape(k, -1)
    dcols = (wmat @ g_cn).reshape(kh, kw, c, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    dxp = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dxp.transpose(1, 0, 2, 3), grad_kernel, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean downsampling of (N,C,H,W)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = upstream.shape
    q = np.broadcast_to((upstream * 0.25)[:, :, :, None, :, None], (n, c, h, 2, w, 2))
    return q.reshape(n, c, 2 * h, 2 * w)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects (N,C,H,W) with H,W >= 1, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(upstream[:, :, None, None] / (h * w), x_shape).copy()


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias


def linear_backward(x, weight, upstream):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    if upstream.shape != (x.shape[0], weight.shape[0]):
        raise ValueError(f"linear: upstream {upstream.shape} != output {(x.shape[0], weight.shape[0])}")
    return upstream @ weight, upstream.T @ x, upstream.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def multilabel_soft_margin_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy over every (sample, class) entry.

    Soft targets in [0, 1] are accepted.  Returns ``(loss, grad_logits)``.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ")
    if np.any(targets < 0) or np.any(targets > 1) or not np.all(np.isfinite(targets)):
        raise ValueError("targets must lie in [0, 1]")
    # softplus(x) - y*x == -(y log s(x) + (1-y) log(1-s(x))), stable for large |x|
    loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
    grad = (sigmoid(logits) - targets) / logits.size
    return loss, grad


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    Only keys present in ``grads`` are updated; the rest of ``params`` is
    carried over untouched.  Returns ``(new_params, new_state)``; inputs are
    not modified.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state = state or AdamState()
    t = state.step + 1
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"grad for {name!r} has shape {g.shape}, param has {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(step=t, m=m_new, v=v_new)
