"""Input checking helpers shared by the estimators and the CLI."""

import numpy as np

from .exceptions import RejectedInputError
from .models import PATCH_SIZE
from .tensor_core import DTYPE


def to_intensity(image):
    """Return a float32 ``H x W`` image in ``[0, 1]``.

    8-bit and 16-bit integer images are divided by their full-scale value;
    float images are assumed to be normalized already.
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise RejectedInputError(f"expected a single-channel H x W image, got shape {np.shape(image)}")
    if np.issubdtype(arr.dtype, np.integer):
        return (arr.astype(DTYPE) / np.iinfo(arr.dtype).max).astype(DTYPE)
    out = arr.astype(DTYPE)
    if not np.isfinite(out).all():
        raise RejectedInputError("image contains NaN or Inf")
    return out


def check_image(image, min_size=PATCH_SIZE):
    img = to_intensity(image)
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise RejectedInputError(f"image {img.shape} is smaller than {min_size}x{min_size}")
    return img


def check_patches(X):
    """Coerce ``X`` to an ``n x 1 x 96 x 96`` float32 stack.

    Accepts ``n x 96 x 96``, ``n x 1 x 96 x 96`` or flattened ``n x 9216`` input.
    """
    arr = np.asarray(X)
    if arr.ndim == 2 and arr.shape[1] == PATCH_SIZE * PATCH_SIZE:
        arr = arr.reshape(-1, 1, PATCH_SIZE, PATCH_SIZE)
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1:] != (1, PATCH_SIZE, PATCH_SIZE):
        raise RejectedInputError(f"patches must be {PATCH_SIZE}x{PATCH_SIZE}, got array of shape {np.shape(X)}")
    if len(arr) == 0:
        raise RejectedInputError("no patches given")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(DTYPE) / np.iinfo(arr.dtype).max
    arr = arr.astype(DTYPE, copy=False)
    if not np.isfinite(arr).all():
        raise RejectedInputError("patches contain NaN or Inf")
    return arr


def check_targets(y, n):
    y = np.asarray(y, dtype=DTYPE).reshape(-1)
    if len(y) != n:
        raise RejectedInputError(f"got {len(y)} targets for {n} patches")
    if ((y < 0) | (y > 1)).any() or not np.isfinite(y).all():
        raise RejectedInputError("objectness targets must lie in [0, 1]")
    return y


def check_unit_interval(value, name):
    if not 0.0 <= value <= 1.0:
        raise RejectedInputError(f"{name} must lie in [0, 1], got {value}")
    return float(value)
