"""Dense array checks and differentiable layer primitives.

Everything operates on float64 numpy arrays. Each differentiable operation
comes in a forward / vjp pair: the forward returns ``(output, cache)`` and
the vjp consumes the cache plus the gradient of the loss with respect to
the output, returning exact adjoint gradients. There is no autograd; model
code wires the vjps together by hand.

Array layout conventions:
  * a window / feature block is ``[maps, length]``
  * a batch of them is ``[batch, maps, length]``
  * convolution filters are ``[out_maps, in_maps, kernel]``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Array shapes incompatible with an operation; names the offending axis."""


def as_tensor(values, shape=None) -> np.ndarray:
    """Validate external data into a dense float64 array.

    Rejects NaN/Inf and, when ``shape`` is given, checks that the flat data
    length matches the product of the extents before reshaping.
    """
    arr = np.asarray(values, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(
                f"data length {arr.size} does not match shape {shape} "
                f"(product {int(np.prod(shape))})"
            )
        arr = arr.reshape(shape)
    if arr.ndim > 3:
        raise ShapeError(f"at most 3 axes supported, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values rejected at tensor construction")
    return np.ascontiguousarray(arr)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote [maps, length] to [1, maps, length]; report whether we did."""
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected 2 or 3 axes, got shape {x.shape}")


# ---------------------------------------------------------------------------
# correlation (the affine map of every conv layer)
# ---------------------------------------------------------------------------

@dataclass
class CorrelateCache:
    x: np.ndarray          # [B, Pin, L] as seen by the forward pass
    w: np.ndarray          # [Pout, Pin, d]
    stride: int
    out_shape: tuple       # [B, Pout, Lout]
    squeezed: bool


def correlate(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Valid-mode discrete correlation (filters not flipped), plus bias.

    out[i, t] = b[i] + sum_j sum_k w[i, j, k] * x[j, t*stride + k]

    ``x`` is [in_maps, L] or [batch, in_maps, L]; ``w`` is
    [out_maps, in_maps, kernel]; ``b`` is [out_maps]. Output length is
    floor((L - kernel) / stride) + 1; no padding.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xb, squeezed = _as_batch(x)
    if w.ndim != 3:
        raise ShapeError(f"filter axis count: expected [out, in, kernel], got {w.shape}")
    n_batch, p_in, length = xb.shape
    p_out, p_in_w, kernel = w.shape
    if p_in_w != p_in:
        raise ShapeError(
            f"input-map axis: x has {p_in} maps but filters expect {p_in_w}"
        )
    if b.shape != (p_out,):
        raise ShapeError(f"bias axis: expected ({p_out},), got {b.shape}")
    if length < kernel:
        raise ShapeError(
            f"length axis: input length {length} shorter than kernel {kernel}"
        )
    windows = sliding_window_view(xb, kernel, axis=2)[:, :, ::stride, :]
    out = np.einsum("bjtk,ijk->bit", windows, w, optimize=True)
    out += b[None, :, None]
    cache = CorrelateCache(xb, w, stride, out.shape, squeezed)
    return (out[0] if squeezed else out), cache


def correlate_vjp(cache: CorrelateCache, grad_out: np.ndarray):
    """Adjoint of :func:`correlate`: gradients for (x, w, b)."""
    gb = grad_out[None] if (cache.squeezed and grad_out.ndim == 2) else grad_out
    if gb.shape != cache.out_shape:
        raise ShapeError(
            f"gradient shape {gb.shape} does not match forward output {cache.out_shape}"
        )
    xb, w, stride = cache.x, cache.w, cache.stride
    n_batch, p_in, length = xb.shape
    p_out, _, kernel = w.shape
    l_out = cache.out_shape[2]

    grad_b = gb.sum(axis=(0, 2))
    windows = sliding_window_view(xb, kernel, axis=2)[:, :, ::stride, :]
    grad_w = np.einsum("bit,bjtk->ijk", gb, windows, optimize=True)

    grad_x = np.zeros_like(xb)
    if l_out == 1:
        grad_x[:, :, :kernel] = np.einsum("bi,ijk->bjk", gb[:, :, 0], w, optimize=True)
    else:
        # scatter one kernel tap at a time; kernel is short whenever l_out > 1
        span = (l_out - 1) * stride + 1
        for k in range(kernel):
            grad_x[:, :, k:k + span:stride] += np.einsum(
                "bit,ij->bjt", gb, w[:, :, k], optimize=True
            )
    if cache.squeezed:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

@dataclass
class ReluCache:
    pre: np.ndarray        # pre-activation values (kink clearance is testable)


def relu(x: np.ndarray):
    """Elementwise max(u, 0)."""
    return np.maximum(x, 0.0), ReluCache(x)


def relu_vjp(cache: ReluCache, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where the input was strictly positive (subgradient 0 at 0)."""
    if grad_out.shape != cache.pre.shape:
        raise ShapeError(
            f"gradient shape {grad_out.shape} does not match input {cache.pre.shape}"
        )
    return np.where(cache.pre > 0.0, grad_out, 0.0)


def sigmoid(u):
    """Logistic function 1 / (1 + exp(-u)), overflow-safe for |u| up to ~745."""
    u = np.asarray(u, dtype=DTYPE)
    shrink = np.exp(-np.abs(u))
    out = np.where(u >= 0.0, 1.0 / (1.0 + shrink), shrink / (1.0 + shrink))
    return out if out.ndim else float(out)


def softplus(u):
    """log(1 + exp(u)) computed without overflow."""
    return np.logaddexp(0.0, np.asarray(u, dtype=DTYPE))


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

@dataclass
class MaxPoolCache:
    x: np.ndarray          # [B, P, L] input
    argmax: np.ndarray     # [B, P, Lout] index within each window
    kernel: int
    stride: int
    squeezed: bool


def maxpool(x: np.ndarray, kernel: int = 2, stride: int = 2):
    """Max over contiguous windows; trailing remainder samples are dropped.

    Ties resolve to the lowest index (argmax convention), which fixes the
    gradient routing.
    """
    xb, squeezed = _as_batch(x)
    length = xb.shape[2]
    if length < kernel:
        raise ShapeError(f"length axis: input length {length} shorter than pool {kernel}")
    if kernel < 1 or stride < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    windows = sliding_window_view(xb, kernel, axis=2)[:, :, ::stride, :]
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    cache = MaxPoolCache(xb, idx, kernel, stride, squeezed)
    return (out[0] if squeezed else out), cache


def maxpool_vjp(cache: MaxPoolCache, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient to the argmax position of its window."""
    gb = grad_out[None] if (cache.squeezed and grad_out.ndim == 2) else grad_out
    if gb.shape != cache.argmax.shape:
        raise ShapeError(
            f"gradient shape {gb.shape} does not match pooled output {cache.argmax.shape}"
        )
    n_batch, p, l_out = gb.shape
    grad_x = np.zeros_like(cache.x)
    positions = cache.argmax + np.arange(l_out)[None, None, :] * cache.stride
    bi = np.arange(n_batch)[:, None, None]
    pi = np.arange(p)[None, :, None]
    np.add.at(grad_x, (bi, pi, positions), gb)
    return grad_x[0] if cache.squeezed else grad_x


# ---------------------------------------------------------------------------
# batch normalization (per feature map over batch and length axes)
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray    # [P], 1/sqrt(var + eps) actually used
    scale: np.ndarray
    train_mode: bool


def batchnorm_forward(x, scale, shift, running_mean, running_var, train,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                      initialized: bool = True):
    """Normalize each feature map over the batch and length axes.

    Train mode normalizes with batch statistics (biased variance) and returns
    updated running statistics; eval mode normalizes with the running
    statistics and returns them unchanged. Returns
    ``(out, cache, (new_running_mean, new_running_var))``.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm expects [batch, maps, length], got {x.shape}")
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
    else:
        if not initialized:
            logger.warning(
                "batchnorm eval requested before any train step; "
                "normalizing with init stats (mean 0, var 1)"
            )
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = scale[None, :, None] * xhat + shift[None, :, None]
    return out, BatchNormCache(xhat, inv_std, scale, train), (new_mean, new_var)


def batchnorm_vjp(cache: BatchNormCache, grad_out: np.ndarray):
    """Gradients for (x, scale, shift)."""
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(
            f"gradient shape {grad_out.shape} does not match output {cache.xhat.shape}"
        )
    xhat, inv_std = cache.xhat, cache.inv_std
    grad_shift = grad_out.sum(axis=(0, 2))
    grad_scale = (grad_out * xhat).sum(axis=(0, 2))
    gx_hat = grad_out * cache.scale[None, :, None]
    if not cache.train_mode:
        return gx_hat * inv_std[None, :, None], grad_scale, grad_shift
    n = xhat.shape[0] * xhat.shape[2]
    sum_g = gx_hat.sum(axis=(0, 2), keepdims=True)
    sum_gx = (gx_hat * xhat).sum(axis=(0, 2), keepdims=True)
    grad_x = (inv_std[None, :, None] / n) * (n * gx_hat - sum_g - xhat * sum_gx)
    return grad_x, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# fully-connected layer
# ---------------------------------------------------------------------------

@dataclass
class LinearCache:
    x: np.ndarray          # [B, n]
    w: np.ndarray          # [m, n]
    squeezed: bool


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map w @ x + b for a single vector [n] or a batch [B, n]."""
    squeezed = x.ndim == 1
    xb = x[None] if squeezed else x
    if xb.ndim != 2:
        raise ShapeError(f"linear input must be [n] or [batch, n], got {x.shape}")
    m, n = w.shape
    if xb.shape[1] != n:
        raise ShapeError(f"input axis: expected {n} features, got {xb.shape[1]}")
    if b.shape != (m,):
        raise ShapeError(f"bias axis: expected ({m},), got {b.shape}")
    out = xb @ w.T + b[None, :]
    cache = LinearCache(xb, w, squeezed)
    return (out[0] if squeezed else out), cache


def linear_vjp(cache: LinearCache, grad_out: np.ndarray):
    """Adjoint of :func:`linear_forward`: gradients for (x, w, b)."""
    gb = grad_out[None] if (cache.squeezed and grad_out.ndim == 1) else grad_out
    if gb.ndim != 2 or gb.shape != (cache.x.shape[0], cache.w.shape[0]):
        raise ShapeError(
            f"gradient shape {grad_out.shape} does not match output "
            f"({cache.x.shape[0]}, {cache.w.shape[0]})"
        )
    grad_x = gb @ cache.w
    grad_w = gb.T @ cache.x
    grad_b = gb.sum(axis=0)
    if cache.squeezed:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# binary cross-entropy in logit space
# ---------------------------------------------------------------------------

def bce_loss(logits, labels):
    """Per-sample BCE computed from logits, with its logit gradient.

    Labels live in {-1, +1} and are mapped to targets t = (y+1)/2. The loss
    is softplus(z) - t*z, which never evaluates log(0); the gradient with
    respect to z is sigmoid(z) - t. Returns ``(losses, grad_logits)``, both
    shaped like ``logits``.
    """
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(labels, dtype=DTYPE)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ")
    target = (y + 1.0) / 2.0
    losses = softplus(z) - target * z
    grad = sigmoid(z) - target
    return losses, grad
