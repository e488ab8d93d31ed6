"""Dense float32 layer math with forward and backward passes.

Tensors are plain :class:`numpy.ndarray` objects in ``float32``. Image-like
operations accept either a single ``C x H x W`` array or a batch
``N x C x H x W``; the output keeps the same rank as the input.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import RejectedInputError

DTYPE = np.float32

# Largest im2col buffer (in elements) built in one piece; bigger jobs are
# processed in output-row chunks.
_IM2COL_LIMIT = 1 << 24

_SIGMOID_LO = np.float32(np.finfo(np.float32).tiny)
_SIGMOID_HI = np.nextafter(np.float32(1.0), np.float32(0.0))


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_h: int
    kernel_w: int
    padding: str = "valid"
    stride: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise RejectedInputError("kernel extents must be >= 1")
        if self.out_channels < 1:
            raise RejectedInputError("out_channels must be >= 1")
        if self.padding not in ("valid", "same"):
            raise RejectedInputError(f"unknown padding {self.padding!r}")
        if self.stride != 1:
            raise RejectedInputError("only stride 1 is supported")


def _batched(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None].astype(DTYPE, copy=False), True
    if x.ndim == 4:
        return x.astype(DTYPE, copy=False), False
    raise RejectedInputError(f"{name} must be C x H x W or N x C x H x W, got shape {x.shape}")


def _unbatch(x, squeeze):
    return x[0] if squeeze else x


def to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def same_padding(k):
    """Return ``(before, after)`` zero padding that keeps an extent under kernel ``k``."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _resolve_padding(padding):
    if isinstance(padding, ConvSpec):
        return padding.padding
    if padding not in ("valid", "same"):
        raise RejectedInputError(f"unknown padding {padding!r}")
    return padding


def _check_conv(in_shape, weights, bias, padding):
    """``in_shape`` is ``(N, H, W, C)``; returns the output extents."""
    if weights.ndim != 4:
        raise RejectedInputError(f"weights must be O x C x kh x kw, got shape {weights.shape}")
    o, c, kh, kw = weights.shape
    if in_shape[3] != c:
        raise RejectedInputError(f"input has {in_shape[3]} channels, weights expect {c}")
    if bias is not None and np.shape(bias) != (o,):
        raise RejectedInputError(f"bias must have shape ({o},), got {np.shape(bias)}")
    h, w = in_shape[1:3]
    if padding == "same":
        return h, w
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise RejectedInputError(
            f"valid convolution of {h}x{w} input with {kh}x{kw} kernel has empty output"
        )
    return ho, wo


def _pad_nhwc(x, pad_h, pad_w):
    if pad_h == (0, 0) and pad_w == (0, 0):
        return x
    return np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)))


def _im2col_rows(windows, r0, r1):
    """Rows of the im2col matrix for output rows ``r0:r1``; columns ordered (kh, kw, C)."""
    block = windows[:, r0:r1]
    if block.shape[3] == 1:
        # single channel: a plain copy is much faster than the transposed one
        return block[:, :, :, 0].reshape(-1, block.shape[4] * block.shape[5])
    block = block.transpose(0, 1, 2, 4, 5, 3)
    return block.reshape(-1, block.shape[3] * block.shape[4] * block.shape[5])


def _row_chunks(n, ho, wo, k):
    step = max(1, _IM2COL_LIMIT // max(1, n * wo * k))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def conv_nhwc(x, weights, bias, padding):
    """Channels-last convolution kernel behind :func:`conv2d_forward`."""
    ho, wo = _check_conv(x.shape, weights, bias, padding)
    n, _, _, c = x.shape
    o, _, kh, kw = weights.shape
    if kh == 1 and kw == 1:
        out = x.reshape(-1, c) @ weights.reshape(o, c).T
    else:
        if padding == "same":
            x = _pad_nhwc(x, same_padding(kh), same_padding(kw))
        windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
        wmat = np.ascontiguousarray(weights.transpose(0, 2, 3, 1).reshape(o, -1).T)
        out = np.empty((n, ho, wo, o), DTYPE)
        for r0, r1 in _row_chunks(n, ho, wo, c * kh * kw):
            out[:, r0:r1] = (_im2col_rows(windows, r0, r1) @ wmat).reshape(n, r1 - r0, wo, o)
    out = out.reshape(n, ho, wo, o)
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)
    return out


def conv_nhwc_backward(x, weights, grad_out, padding, input_grad=True):
    """Gradients of :func:`conv_nhwc`; all arrays channels-last.

    With ``input_grad=False`` the input gradient is skipped and returned as ``None``.
    """
    ho, wo = _check_conv(x.shape, weights, None, padding)
    n, h, w, c = x.shape
    o, _, kh, kw = weights.shape
    if grad_out.shape != (n, ho, wo, o):
        raise RejectedInputError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, ho, wo, o)}"
        )
    gm = grad_out.reshape(-1, o)
    grad_bias = gm.sum(axis=0, dtype=DTYPE)
    if kh == 1 and kw == 1:
        grad_w = (gm.T @ x.reshape(-1, c)).reshape(o, c, 1, 1)
        grad_x = (gm @ weights.reshape(o, c)).reshape(x.shape) if input_grad else None
        return grad_x, grad_w, grad_bias

    (t, b), (l, r) = (same_padding(kh), same_padding(kw)) if padding == "same" else ((0, 0), (0, 0))
    xp = _pad_nhwc(x, (t, b), (l, r))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    grad_w = np.zeros((c * kh * kw, o), DTYPE)
    for r0, r1 in _row_chunks(n, ho, wo, c * kh * kw):
        grad_w += _im2col_rows(windows, r0, r1).T @ grad_out[:, r0:r1].reshape(-1, o)
    grad_w = np.ascontiguousarray(grad_w.T.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
    if not input_grad:
        return None, grad_w, grad_bias

    # Input gradient is a correlation of the padded output gradient with the
    # spatially flipped, channel-swapped kernel.
    flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gpad = _pad_nhwc(grad_out, (kh - 1 - t, kh - 1 - b), (kw - 1 - l, kw - 1 - r))
    grad_x = conv_nhwc(gpad, flipped, None, "valid")
    return grad_x, grad_w, grad_bias


def conv2d_forward(x, weights, bias, padding="valid"):
    """2-D cross-correlation, stride 1, ``valid`` or zero-filled ``same`` padding."""
    xb, squeeze = _batched(x)
    weights = np.asarray(weights, dtype=DTYPE)
    padding = _resolve_padding(padding)
    out = conv_nhwc(to_nhwc(xb), weights, bias, padding)
    return _unbatch(to_nchw(out), squeeze)


def conv2d_backward(x, weights, grad_out, padding="valid"):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out, "grad_out")
    weights = np.asarray(weights, dtype=DTYPE)
    padding = _resolve_padding(padding)
    gx, gw, gbias = conv_nhwc_backward(to_nhwc(xb), weights, to_nhwc(gb), padding)
    return _unbatch(to_nchw(gx), squeeze), gw, gbias


def pool_nhwc(x, size, with_argmax=True):
    """Channels-last max pooling; returns output and in-window argmax (row-major, first wins).

    The argmax is ``None`` when ``with_argmax`` is false.
    """
    if size < 1:
        raise RejectedInputError(f"pool size must be >= 1, got {size}")
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise RejectedInputError(f"{h}x{w} input is smaller than pool size {size}")
    blocks = x[:, :ho * size, :wo * size].reshape(n, ho, size, wo, size, c)
    views = [blocks[:, :, dy, :, dx] for dy in range(size) for dx in range(size)]
    out = views[0].copy()
    idx = np.zeros(out.shape, np.int32) if with_argmax else None
    for k, v in enumerate(views[1:], start=1):
        if with_argmax:
            idx = np.where(v > out, k, idx)
        np.maximum(out, v, out=out)
    return out, idx


def pool_nhwc_backward(grad_out, idx, size, in_shape):
    n, h, w, c = in_shape
    ho, wo = grad_out.shape[1:3]
    grad = np.zeros(in_shape, DTYPE)
    k = 0
    for dy in range(size):
        for dx in range(size):
            np.copyto(grad[:, dy:ho * size:size, dx:wo * size:size], grad_out, where=idx == k)
            k += 1
    return grad


def maxpool2d(x, size):
    """Non-overlapping max pooling.

    Extents that are not multiples of ``size`` are cropped at the bottom and
    right. Ties go to the first element in row-major order. Returns the pooled
    tensor and the flat in-window argmax indices needed by the backward pass.
    """
    if size < 1:
        raise RejectedInputError(f"pool size must be >= 1, got {size}")
    xb, squeeze = _batched(x)
    out, idx = pool_nhwc(to_nhwc(xb), size)
    return _unbatch(to_nchw(out), squeeze), _unbatch(to_nchw(idx), squeeze)


def maxpool2d_backward(grad_out, argmax, size, input_shape):
    """Route ``grad_out`` to the stored argmax positions; other cells get zero."""
    gb, squeeze = _batched(grad_out, "grad_out")
    idx = np.asarray(argmax)
    if idx.ndim == 3:
        idx = idx[None]
    if idx.shape != gb.shape:
        raise RejectedInputError("argmax and grad_out shapes differ")
    n, c = gb.shape[:2]
    h, w = input_shape[-2:]
    grad = pool_nhwc_backward(to_nhwc(gb), to_nhwc(idx), size, (n, h, w, c))
    return _unbatch(to_nchw(grad), squeeze)


def dense(x, weights, bias):
    """Affine map ``weights @ x + bias`` on a flat vector or an ``N x D`` batch."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.ndim != 2:
        raise RejectedInputError(f"weights must be M x N, got shape {weights.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise RejectedInputError(f"input length {x.shape[-1]} does not match weights {weights.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise RejectedInputError(f"bias must have shape ({weights.shape[0]},)")
    return (x @ weights.T + np.asarray(bias, dtype=DTYPE)).astype(DTYPE, copy=False)


def dense_backward(x, weights, grad_out):
    x = np.asarray(x, dtype=DTYPE)
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape[-1] != weights.shape[0] or x.shape[-1] != weights.shape[1]:
        raise RejectedInputError("dense backward shapes inconsistent with weights")
    grad_x = g @ weights
    if x.ndim == 1:
        grad_w = np.outer(g, x)
        grad_b = g.copy()
    else:
        grad_w = g.T @ x
        grad_b = g.sum(axis=0)
    return grad_x.astype(DTYPE), grad_w.astype(DTYPE), grad_b.astype(DTYPE)


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0)


def relu_backward(x, grad_out):
    """Backward pass; ``x`` may be the forward input or output (same sign pattern)."""
    return (grad_out * (np.asarray(x) > 0)).astype(DTYPE, copy=False)


def sigmoid(x):
    """Logistic function, clipped so outputs stay strictly inside (0, 1) in float32."""
    x = np.asarray(x, dtype=DTYPE)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(DTYPE)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid_backward(y, grad_out):
    """Backward pass given the forward *output* ``y``."""
    y = np.asarray(y, dtype=DTYPE)
    return (grad_out * y * (1 - y)).astype(DTYPE)


def bilinear_resize(x, target_h, target_w):
    """Corner-aligned bilinear interpolation of a ``1 x h x w`` (or ``h x w``) map."""
    if target_h < 1 or target_w < 1:
        raise RejectedInputError(f"target extents must be >= 1, got {target_h}x{target_w}")
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise RejectedInputError(f"expected a C x h x w map, got shape {x.shape}")
    h, w = x.shape[1:]
    if (h, w) == (target_h, target_w):
        out = x.copy()
        return out[0] if squeeze else out

    def axis_weights(src, dst):
        if dst == 1 or src == 1:
            pos = np.zeros(dst)
        else:
            pos = np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.minimum(np.floor(pos).astype(int), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        frac = (pos - lo).astype(DTYPE)
        return lo, hi, frac

    r0, r1, fr = axis_weights(h, target_h)
    c0, c1, fc = axis_weights(w, target_w)
    top = x[:, r0] * (1 - fr)[None, :, None] + x[:, r1] * fr[None, :, None]
    out = top[:, :, c0] * (1 - fc) + top[:, :, c1] * fc
    # Convex combinations can overshoot by an ulp; keep the range guarantee.
    out = np.clip(out, x.min(), x.max()).astype(DTYPE)
    return out[0] if squeeze else out


def xcorr2d_normalized(image, template):
    """Zero-mean normalized cross-correlation of two equally sized patches.

    Returns 0 when either patch is constant.
    """
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(template, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInputError(f"patch shapes differ: {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom <= 0 or not np.isfinite(denom):
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise RejectedInputError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise RejectedInputError("mse of empty tensors is undefined")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2 * diff / diff.size).astype(DTYPE)
