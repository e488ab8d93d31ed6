"""Binary container for network weights and template banks.

Layout, all integers unsigned 32-bit little-endian unless noted::

    magic       5 bytes  b"SPNW1"
    count       u32      number of records
    record * count:
        tag_len  u8, then tag_len ASCII bytes  (conv, maxpool, dense, relu,
                 sigmoid, input, templates)
        n_attrs  u32, then n_attrs attribute values (u32)
        w_ndim   u32, then w_ndim extents;  w_ndim == 0 means no tensor
        b_ndim   u32, then b_ndim extents;  b_ndim == 0 means no tensor
        weights  float32 little-endian, C order
        bias     float32 little-endian

Attributes per tag: ``input`` (C, H, W); ``conv`` (out_channels, kh, kw,
padding: 0 valid / 1 same); ``maxpool`` (size); ``dense`` (units);
``relu``/``sigmoid``/``templates`` none. A network file starts with an
``input`` record followed by one record per layer. Dense weights are
stored as ``units x (C*H*W)`` with the input flattened channel-major,
row-major, so they can be reshaped directly into a ``units x C x H x W``
convolution kernel.
"""

import struct
from pathlib import Path

import numpy as np

from .exceptions import RejectedInputError
from .models import LayerSpec, NetworkSpec, check_params
from .tensor_core import DTYPE, ConvSpec

MAGIC = b"SPNW1"


def _write_tensor_header(fh, arr):
    if arr is None:
        fh.write(struct.pack("<I", 0))
    else:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))


def write_records(path, records):
    """``records`` is a list of ``(tag, attrs, weights_or_None, bias_or_None)``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for tag, attrs, w, b in records:
            raw = tag.encode("ascii")
            fh.write(struct.pack("<B", len(raw)) + raw)
            fh.write(struct.pack("<I", len(attrs)))
            if attrs:
                fh.write(struct.pack(f"<{len(attrs)}I", *attrs))
            w = None if w is None else np.ascontiguousarray(w, dtype="<f4")
            b = None if b is None else np.ascontiguousarray(b, dtype="<f4")
            _write_tensor_header(fh, w)
            _write_tensor_header(fh, b)
            for arr in (w, b):
                if arr is not None:
                    fh.write(arr.tobytes())


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    data = fh.read(size)
    if len(data) != size:
        raise RejectedInputError("weights file is truncated")
    return struct.unpack(fmt, data)


def _read_tensor_shape(fh):
    (ndim,) = _read(fh, "<I")
    return _read(fh, f"<{ndim}I") if ndim else None


def _read_tensor(fh, shape):
    if shape is None:
        return None
    count = int(np.prod(shape))
    data = fh.read(4 * count)
    if len(data) != 4 * count:
        raise RejectedInputError("weights file is truncated")
    return np.frombuffer(data, dtype="<f4").astype(DTYPE).reshape(shape)


def read_records(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise RejectedInputError(f"{path}: not a weights file (bad magic)")
        (count,) = _read(fh, "<I")
        records = []
        for _ in range(count):
            (tag_len,) = _read(fh, "<B")
            tag = fh.read(tag_len).decode("ascii")
            (n_attrs,) = _read(fh, "<I")
            attrs = _read(fh, f"<{n_attrs}I") if n_attrs else ()
            wshape = _read_tensor_shape(fh)
            bshape = _read_tensor_shape(fh)
            records.append((tag, tuple(attrs), _read_tensor(fh, wshape), _read_tensor(fh, bshape)))
        if fh.read(1):
            raise RejectedInputError(f"{path}: trailing bytes after last record")
    return records


def save_network(path, spec, params):
    check_params(spec, params)
    records = [("input", tuple(spec.input_shape), None, None)]
    for layer, p in zip(spec.layers, params):
        if layer.kind == "conv":
            c = layer.conv
            attrs = (c.out_channels, c.kernel_h, c.kernel_w, 1 if c.padding == "same" else 0)
        elif layer.kind == "maxpool":
            attrs = (layer.pool,)
        elif layer.kind == "dense":
            attrs = (layer.units,)
        else:
            attrs = ()
        w, b = p if p is not None else (None, None)
        records.append((layer.kind, attrs, w, b))
    write_records(Path(path), records)


def load_network(path, name=""):
    records = read_records(path)
    if not records or records[0][0] != "input":
        raise RejectedInputError(f"{path}: not a network file (first record is not 'input')")
    input_shape = records[0][1]
    layers, params = [], []
    for tag, attrs, w, b in records[1:]:
        if tag == "conv":
            out, kh, kw, pad = attrs
            layers.append(LayerSpec("conv", conv=ConvSpec(out, kh, kw, "same" if pad else "valid")))
        elif tag == "maxpool":
            layers.append(LayerSpec("maxpool", pool=attrs[0]))
        elif tag == "dense":
            layers.append(LayerSpec("dense", units=attrs[0]))
        elif tag in ("relu", "sigmoid"):
            layers.append(LayerSpec(tag))
        else:
            raise RejectedInputError(f"{path}: unexpected record {tag!r} in a network file")
        params.append(None if w is None else (w, b))
    spec = NetworkSpec(tuple(layers), tuple(input_shape), name=name)
    check_params(spec, params)
    return spec, params


def file_kind(path):
    """``'network'`` or ``'templates'`` depending on the first record."""
    records = read_records(path)
    if records and records[0][0] == "templates":
        return "templates"
    return "network"
