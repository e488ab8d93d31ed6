"""Template-matching pseudo-objectness: max normalized cross-correlation over a bank."""

from dataclasses import dataclass

import numpy as np

from .exceptions import RejectedInputError
from .models import PATCH_SIZE
from .proposals import image_windows, map_from_grid
from .tensor_core import DTYPE, xcorr2d_normalized
from .validation import check_image, check_patches
from .weights_io import read_records, write_records

TEMPLATE_COUNT = 100


@dataclass(frozen=True)
class TemplateBank:
    templates: np.ndarray  # T x 96 x 96

    def __post_init__(self):
        t = np.asarray(self.templates, DTYPE)
        if t.ndim != 3 or t.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
            raise RejectedInputError(f"templates must be T x {PATCH_SIZE} x {PATCH_SIZE}, got {t.shape}")
        if len(t) == 0:
            raise RejectedInputError("template bank is empty")
        object.__setattr__(self, "templates", t)

    def __len__(self):
        return len(self.templates)

    def add(self, patches):
        extra = check_patches(patches)[:, 0]
        return TemplateBank(np.concatenate([self.templates, extra]))


def select_templates(train_set, count=TEMPLATE_COUNT, seed=0):
    """Pick ``count`` distinct positive patches uniformly without replacement."""
    if hasattr(train_set, "patches"):
        patches, objectness = train_set.patches, train_set.objectness
    else:
        patches, objectness = train_set
    patches = check_patches(patches)
    positive = np.flatnonzero(np.asarray(objectness).reshape(-1) > 0)
    if count < 1:
        raise RejectedInputError("template count must be >= 1")
    if len(positive) < count:
        raise RejectedInputError(f"need {count} positive patches, training set has {len(positive)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(positive, size=count, replace=False))
    return TemplateBank(patches[chosen, 0])


def tm_objectness(bank, patch):
    """Reference scorer: loop over templates, clamp the best correlation to [0, 1]."""
    if bank is None or len(bank) == 0:
        raise RejectedInputError("template bank is empty")
    best = max(xcorr2d_normalized(patch, t) for t in bank.templates)
    return float(min(max(best, 0.0), 1.0))


def _normalized_rows(flat):
    # zero-mean, unit-norm rows; zero-variance rows stay all zero so they score 0
    flat = flat - flat.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    out = np.zeros_like(flat)
    ok = norm > 1e-12 * flat.shape[1]
    out[ok] = flat[ok] / norm[ok, None]
    return out


def tm_scores(bank, patches, batch_size=1024):
    """Vectorised ``tm_objectness`` over a batch of patches (float64 arithmetic)."""
    if bank is None or len(bank) == 0:
        raise RejectedInputError("template bank is empty")
    x = check_patches(patches)
    t = _normalized_rows(bank.templates.reshape(len(bank), -1).astype(np.float64))
    out = np.empty(len(x), np.float64)
    for s in range(0, len(x), batch_size):
        rows = _normalized_rows(x[s:s + batch_size].reshape(-1, PATCH_SIZE * PATCH_SIZE).astype(np.float64))
        out[s:s + batch_size] = (rows @ t.T).max(axis=1)
    return np.clip(out, 0.0, 1.0)


def tm_objectness_map(bank, image, stride=4, batch_size=512):
    img = check_image(image)
    windows = image_windows(img, stride)
    gh, gw = windows.shape[:2]
    flat = windows.reshape(gh * gw, PATCH_SIZE, PATCH_SIZE)
    grid = np.empty(gh * gw, np.float64)
    for s in range(0, len(flat), batch_size):
        grid[s:s + batch_size] = tm_scores(bank, np.ascontiguousarray(flat[s:s + batch_size]), batch_size)
    return map_from_grid(grid.reshape(gh, gw), *img.shape, stride)


def save_templates(path, bank):
    write_records(path, [("templates", (), bank.templates, None)])


def load_templates(path):
    records = read_records(path)
    if len(records) != 1 or records[0][0] != "templates":
        raise RejectedInputError(f"{path}: not a template bank (expected a single 'templates' record)")
    return TemplateBank(records[0][2])
