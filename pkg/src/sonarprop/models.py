"""The two objectness networks, their forward/backward passes, and FC-to-conv conversion.

A network is an immutable :class:`NetworkSpec` (ordered :class:`LayerSpec`
entries) plus a parameter list aligned with the layers: trainable layers
carry a ``(weights, bias)`` pair, every other layer carries ``None``.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core as tc
from .exceptions import RejectedInputError
from .tensor_core import DTYPE, ConvSpec

PATCH_SIZE = 96

LAYER_KINDS = ("conv", "maxpool", "dense", "relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    conv: ConvSpec = None
    pool: int = 0
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise RejectedInputError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.conv is None:
            raise RejectedInputError("conv layer needs a ConvSpec")
        if self.kind == "maxpool" and self.pool < 1:
            raise RejectedInputError("maxpool layer needs a pool size >= 1")
        if self.kind == "dense" and self.units < 1:
            raise RejectedInputError("dense layer needs units >= 1")

    @property
    def trainable(self):
        return self.kind in ("conv", "dense")

    def describe(self):
        if self.kind == "conv":
            c = self.conv
            return f"Conv({c.out_channels}, {c.kernel_h}x{c.kernel_w}, {c.padding})"
        if self.kind == "maxpool":
            return f"MP({self.pool}x{self.pool})"
        if self.kind == "dense":
            return f"FC({self.units})"
        return self.kind


def conv(out_channels, kernel, padding="valid"):
    return LayerSpec("conv", conv=ConvSpec(out_channels, kernel, kernel, padding))


def maxpool(size):
    return LayerSpec("maxpool", pool=size)


def fc(units):
    return LayerSpec("dense", units=units)


RELU = LayerSpec("relu")
SIGMOID = LayerSpec("sigmoid")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple = (1, PATCH_SIZE, PATCH_SIZE)
    name: str = field(default="", compare=False)

    @property
    def fully_convolutional(self):
        return all(layer.kind != "dense" for layer in self.layers)

    def __str__(self):
        body = " -> ".join(layer.describe() for layer in self.layers)
        return f"{self.name or 'network'}: {body}"


def layer_shapes(spec, input_shape=None):
    """Shapes after each layer (per sample, without batch axis)."""
    shape = tuple(input_shape or spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            if len(shape) != 3:
                raise RejectedInputError(f"layer {i} ({layer.describe()}) needs a C x H x W input")
            c = layer.conv
            _, h, w = shape
            if c.padding == "valid":
                h, w = h - c.kernel_h + 1, w - c.kernel_w + 1
            if h < 1 or w < 1:
                raise RejectedInputError(f"layer {i} ({layer.describe()}) produces an empty map")
            shape = (c.out_channels, h, w)
        elif layer.kind == "maxpool":
            if len(shape) != 3:
                raise RejectedInputError(f"layer {i} (maxpool) needs a C x H x W input")
            ch, h, w = shape
            h, w = h // layer.pool, w // layer.pool
            if h < 1 or w < 1:
                raise RejectedInputError(f"layer {i} (maxpool) produces an empty map")
            shape = (ch, h, w)
        elif layer.kind == "dense":
            shape = (layer.units,)
        shapes.append(shape)
    return shapes


def param_shapes(spec):
    """``(weight_shape, bias_shape)`` per layer, ``None`` for parameter-free layers."""
    shape = tuple(spec.input_shape)
    out = []
    for layer, next_shape in zip(spec.layers, layer_shapes(spec)):
        if layer.kind == "conv":
            c = layer.conv
            out.append(((c.out_channels, shape[0], c.kernel_h, c.kernel_w), (c.out_channels,)))
        elif layer.kind == "dense":
            out.append(((layer.units, int(np.prod(shape))), (layer.units,)))
        else:
            out.append(None)
        shape = next_shape
    return out


def param_count(spec):
    """Total number of weight and bias elements."""
    if not spec.layers:
        return 0
    total = 0
    for entry in param_shapes(spec):
        if entry is not None:
            total += int(np.prod(entry[0])) + int(np.prod(entry[1]))
    return total


def init_params(spec, seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for entry in param_shapes(spec):
        if entry is None:
            params.append(None)
            continue
        wshape, bshape = entry
        if len(wshape) == 4:
            receptive = wshape[2] * wshape[3]
            fan_in, fan_out = wshape[1] * receptive, wshape[0] * receptive
        else:
            fan_in, fan_out = wshape[1], wshape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append((rng.uniform(-limit, limit, wshape).astype(DTYPE), np.zeros(bshape, DTYPE)))
    return params


def build_cnn(seed=0):
    """LeNet-style patch classifier: two 5x5 conv/pool stages, FC(96), FC(1)."""
    spec = NetworkSpec(
        (
            conv(32, 5, "valid"), RELU, maxpool(2),
            conv(32, 5, "valid"), RELU, maxpool(2),
            fc(96), RELU,
            fc(1), SIGMOID,
        ),
        name="cnn",
    )
    return spec, init_params(spec, seed)


def build_fcn_tiny(seed=0):
    """Two Tiny modules (3x3 then 1x1 conv, 24 filters each) with pooling and a single FC(1)."""
    spec = NetworkSpec(
        (
            conv(24, 3, "same"), RELU, conv(24, 1, "same"), RELU, maxpool(2),
            conv(24, 3, "same"), RELU, conv(24, 1, "same"), RELU, maxpool(2),
            fc(1), SIGMOID,
        ),
        name="fcn",
    )
    return spec, init_params(spec, seed)


def check_params(spec, params):
    expected = param_shapes(spec)
    if len(params) != len(expected):
        raise RejectedInputError(f"expected {len(expected)} parameter slots, got {len(params)}")
    for i, (entry, p) in enumerate(zip(expected, params)):
        if entry is None:
            if p is not None:
                raise RejectedInputError(f"layer {i} takes no parameters")
            continue
        if p is None or tuple(p[0].shape) != entry[0] or tuple(p[1].shape) != entry[1]:
            got = None if p is None else (p[0].shape, p[1].shape)
            raise RejectedInputError(f"layer {i}: expected parameter shapes {entry}, got {got}")


def forward(spec, params, x, keep_cache=False):
    """Run ``x`` (``C x H x W`` or ``N x C x H x W``) through the network.

    With ``keep_cache`` the per-layer values needed by :func:`backward` are
    returned as a second element. Feature maps are kept channels-last
    internally; dense layers flatten in channel-major, row-major order.
    """
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise RejectedInputError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")
    x = tc.to_nhwc(x)
    cache = []
    for i, (layer, p) in enumerate(zip(spec.layers, params)):
        aux = None
        if layer.kind == "conv":
            y = tc.conv_nhwc(x, p[0], p[1], layer.conv.padding)
        elif layer.kind == "maxpool":
            y, aux = tc.pool_nhwc(x, layer.pool, with_argmax=keep_cache)
        elif layer.kind == "dense":
            flat = x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1) if x.ndim == 4 else x
            y = tc.dense(flat, p[0], p[1])
        elif layer.kind == "relu":
            # in place on intermediate maps; backward only needs the sign pattern
            y = np.maximum(x, 0, out=x) if i > 0 else tc.relu(x)
        else:
            y = tc.sigmoid(x)
        if keep_cache:
            cache.append((x, y, aux))
        x = y
    if x.ndim == 4:
        x = tc.to_nchw(x)
    out = x[0] if squeeze else x
    return (out, cache) if keep_cache else out


def backward(spec, params, cache, grad_out):
    """Gradients of every parameter given ``d loss / d output`` for a batched forward."""
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.ndim == 4:
        g = tc.to_nhwc(g)
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[i], params[i]
        x, y, aux = cache[i]
        g = g.reshape(y.shape)
        if layer.kind == "conv":
            g, gw, gb = tc.conv_nhwc_backward(x, p[0], g, layer.conv.padding, input_grad=i > 0)
            grads[i] = (gw, gb)
            if g is None:
                break
        elif layer.kind == "maxpool":
            g = tc.pool_nhwc_backward(g, aux, layer.pool, x.shape)
        elif layer.kind == "dense":
            if x.ndim == 4:
                flat = x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1)
                g, gw, gb = tc.dense_backward(flat, p[0], g)
                n, h, w, c = x.shape
                g = tc.to_nhwc(g.reshape(n, c, h, w))
            else:
                g, gw, gb = tc.dense_backward(x, p[0], g)
            grads[i] = (gw, gb)
        elif layer.kind == "relu":
            g = tc.relu_backward(y, g)
        else:
            g = tc.sigmoid_backward(y, g)
    return grads


def _as_patch_batch(patches):
    x = np.asarray(patches, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
        raise RejectedInputError(f"patches must be {PATCH_SIZE}x{PATCH_SIZE} single-channel, got shape {np.shape(patches)}")
    return x


def forward_patch(spec, params, patch):
    """Objectness of one 96x96 patch as a Python float."""
    patch = np.asarray(patch, dtype=DTYPE)
    if patch.shape not in ((PATCH_SIZE, PATCH_SIZE), (1, PATCH_SIZE, PATCH_SIZE)):
        raise RejectedInputError(f"patch must be 96x96, got shape {patch.shape}")
    out = forward(spec, params, patch.reshape(1, 1, PATCH_SIZE, PATCH_SIZE))
    return float(np.asarray(out).reshape(-1)[0])


def predict_patches(spec, params, patches, batch_size=256):
    """Objectness for a stack of patches, shape ``(n,)``."""
    x = _as_patch_batch(patches)
    out = np.empty(len(x), DTYPE)
    for s in range(0, len(x), batch_size):
        out[s:s + batch_size] = np.asarray(forward(spec, params, x[s:s + batch_size])).reshape(-1)
    return out


def fc_to_conv(spec, params):
    """Replace the final dense layer by an equivalent valid convolution.

    The dense weight row for output ``m`` is read as a ``C x h x w`` kernel in
    channel-major, row-major order, the same order used to flatten the
    feature map in :func:`forward`.
    """
    trainable = [i for i, layer in enumerate(spec.layers) if layer.trainable]
    if not trainable or spec.layers[trainable[-1]].kind != "dense":
        raise RejectedInputError("final trainable layer must be dense")
    idx = trainable[-1]
    shapes = layer_shapes(spec)
    in_shape = tuple(spec.input_shape) if idx == 0 else shapes[idx - 1]
    if len(in_shape) != 3 or in_shape[1:] != (24, 24):
        raise RejectedInputError(f"final dense layer must read a C x 24 x 24 feature map, got {in_shape}")
    if any(layer.kind == "dense" for layer in spec.layers[:idx]):
        raise RejectedInputError("only the final layer may be dense")
    c, h, w = in_shape
    dense_layer = spec.layers[idx]
    weights, bias = params[idx]
    kernel = np.ascontiguousarray(weights.reshape(dense_layer.units, c, h, w), dtype=DTYPE)
    layers = list(spec.layers)
    layers[idx] = LayerSpec("conv", conv=ConvSpec(dense_layer.units, h, w, "valid"))
    new_params = list(params)
    new_params[idx] = (kernel, bias.astype(DTYPE).copy())
    new_spec = NetworkSpec(tuple(layers), spec.input_shape, name=f"{spec.name}-conv" if spec.name else "")
    return new_spec, new_params


def _final_conv_index(spec):
    idx = [i for i, layer in enumerate(spec.layers) if layer.trainable]
    if not idx or spec.layers[idx[-1]].kind != "conv" or not spec.fully_convolutional:
        raise RejectedInputError("network is not fully convolutional; convert it with fc_to_conv first")
    return idx[-1]


def window_stride(spec):
    """Pixel step between neighbouring output positions of a fully convolutional net."""
    stride = 1
    for layer in spec.layers:
        if layer.kind == "maxpool":
            stride *= layer.pool
    return stride


def _padding_influence(layers, n, axis):
    """For a 1-D extent ``n``, which feature positions see low-side and high-side zero padding."""
    lo = np.zeros(n, bool)
    hi = np.zeros(n, bool)
    for layer in layers:
        if layer.kind == "conv":
            k = layer.conv.kernel_h if axis == 0 else layer.conv.kernel_w
            if k == 1:
                continue
            if layer.conv.padding != "same":
                raise RejectedInputError("exact border mode needs same-padded feature layers")
            before, after = tc.same_padding(k)
            m = len(lo)
            new_lo = np.zeros(m, bool)
            new_hi = np.zeros(m, bool)
            for p in range(m):
                a, b = max(0, p - before), min(m, p + after + 1)
                new_lo[p] = lo[a:b].any() or p - before < 0
                new_hi[p] = hi[a:b].any() or p + after > m - 1
            lo, hi = new_lo, new_hi
        elif layer.kind == "maxpool":
            m = len(lo) // layer.pool
            lo = lo[:m * layer.pool].reshape(m, layer.pool).any(axis=1)
            hi = hi[:m * layer.pool].reshape(m, layer.pool).any(axis=1)
    return lo, hi


@dataclass(frozen=True)
class _BorderPlan:
    r_lo: int
    r_hi: int
    strip: int


def _border_plan(feature_layers, window, stride, extent):
    plans = []
    for axis in (0, 1):
        lo, hi = _padding_influence(feature_layers, window, axis)
        r_lo = int(np.argmin(lo)) if not lo.all() else len(lo)
        r_hi = int(np.argmin(hi[::-1])) if not hi.all() else len(hi)
        if lo[r_lo:].any() or hi[:len(hi) - r_hi].any() or r_lo + r_hi >= extent:
            raise RejectedInputError("padding influence does not form a border ring")
        strip = stride * max(r_lo, r_hi, 1)
        while strip <= window:
            slo, shi = _padding_influence(feature_layers, strip, axis)
            cells = strip // stride
            if not shi[:r_lo].any() and not slo[cells - r_hi:].any():
                break
            strip += stride
        else:
            raise RejectedInputError("no border strip fits inside the window")
        plans.append(_BorderPlan(r_lo, r_hi, strip))
    if plans[0] != plans[1]:
        raise RejectedInputError("exact border mode needs square kernels")
    return plans[0]


def _features(layers, params, x, chunk=2048):
    """Run the feature layers over a batch, in chunks to bound memory."""
    spec = NetworkSpec(tuple(layers))
    outs = [forward(spec, params, x[s:s + chunk]) for s in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def _correlate(feats, kernel):
    """Valid correlation of a feature batch with a kernel; returns ``N x O x h x w``."""
    return tc.conv2d_forward(feats, kernel, None, "valid")


def full_image_forward(spec, params, image, exact_borders=True):
    """Dense objectness grid for a full image with a fully convolutional network.

    Output cell ``(i, j)`` scores the window whose top-left corner is
    ``(stride * i, stride * j)``. With ``exact_borders`` the outer ring of the
    final kernel is evaluated on per-window features that see the same zero
    padding a standalone patch would, so every cell equals the patch network
    applied to that crop. Without it the shared full-image features are used
    throughout, which is cheaper but differs near each window's border.
    Returns an array ``units x gh x gw``.
    """
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise RejectedInputError(f"image must be H x W single-channel, got shape {np.shape(image)}")
    window = spec.input_shape[1]
    if img.shape[0] < window or img.shape[1] < window:
        raise RejectedInputError(f"image {img.shape} is smaller than the {window}x{window} window")
    idx = _final_conv_index(spec)
    check_params(spec, params)
    if not exact_borders:
        return forward(spec, params, img[None, None])[0]

    feature_layers, feature_params = spec.layers[:idx], params[:idx]
    tail_layers = spec.layers[idx + 1:]
    kernel, bias = params[idx]
    _, _, kh, kw = kernel.shape
    stride = window_stride(NetworkSpec(tuple(feature_layers)))
    if window % stride or kh != kw or kh != window // stride:
        raise RejectedInputError("final kernel does not cover exactly one window")
    plan = _border_plan(feature_layers, window, stride, kh)
    r0, r1, s = plan.r_lo, plan.r_hi, plan.strip
    e = kh
    h, w = img.shape
    gh, gw = (h - window) // stride + 1, (w - window) // stride + 1

    full = _features(feature_layers, feature_params, img[None, None])
    inner = kernel.copy()
    inner[:, :, :r0] = 0
    inner[:, :, e - r1:] = 0
    inner[:, :, :, :r0] = 0
    inner[:, :, :, e - r1:] = 0
    total = _correlate(full, inner)[0][:, :gh, :gw].astype(np.float64)

    rows = np.arange(gh) * stride
    cols = np.arange(gw) * stride
    mid = slice(r0, e - r1)
    cells = s // stride

    if r0:
        top = np.stack([img[r:r + s] for r in rows])[:, None]
        ft = _features(feature_layers, feature_params, top)[:, :, :r0, r0:]
        total += _correlate(ft, kernel[:, :, :r0, mid])[:, :, 0, :gw].transpose(1, 0, 2)
        left = np.stack([img[:, c:c + s] for c in cols])[:, None]
        fl = _features(feature_layers, feature_params, left)[:, :, r0:, :r0]
        total += _correlate(fl, kernel[:, :, mid, :r0])[:, :, :gh, 0].transpose(1, 2, 0)
    if r1:
        bottom = np.stack([img[r + window - s:r + window] for r in rows])[:, None]
        fb = _features(feature_layers, feature_params, bottom)[:, :, cells - r1:, r0:]
        total += _correlate(fb, kernel[:, :, e - r1:, mid])[:, :, 0, :gw].transpose(1, 0, 2)
        right = np.stack([img[:, c + window - s:c + window] for c in cols])[:, None]
        fr = _features(feature_layers, feature_params, right)[:, :, r0:, cells - r1:]
        total += _correlate(fr, kernel[:, :, mid, e - r1:])[:, :, :gh, 0].transpose(1, 2, 0)

    blocks = sliding_window_view(img, (s, s))
    # (crop offset, feature cells in the sub-crop, kernel cells) per axis
    low = (0, slice(0, r0), slice(0, r0))
    high = (window - s, slice(cells - r1, cells), slice(e - r1, e))
    for (dy, fy, ky), (dx, fx, kx) in ((low, low), (low, high), (high, low), (high, high)):
        k = kernel[:, :, ky, kx]
        if k.size == 0:
            continue
        crops = blocks[dy::stride, dx::stride][:gh, :gw].reshape(-1, 1, s, s)
        feats = _features(feature_layers, feature_params, crops)[:, :, fy, fx]
        contrib = np.tensordot(feats, k, axes=([1, 2, 3], [1, 2, 3]))
        total += contrib.T.reshape(-1, gh, gw)

    out = (total + bias[:, None, None]).astype(DTYPE)
    return forward(NetworkSpec(tuple(tail_layers)), params[idx + 1:], out[None])[0]
