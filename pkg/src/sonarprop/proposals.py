"""Objectness maps and detection proposals (thresholding, ranking, NMS)."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from . import models
from .boxes import BoundingBox, as_array, iou_matrix
from .exceptions import AnnotationParseError, RejectedInputError
from .models import PATCH_SIZE
from .tensor_core import DTYPE, bilinear_resize
from .validation import check_image, check_unit_interval

NMS_THRESHOLD = 0.8


@dataclass
class ObjectnessMap:
    """Per-pixel objectness aligned with the input image.

    ``grid[i, j]`` is the score of the window with top-left corner
    ``(stride * j, stride * i)``; ``scores`` is that grid bilinearly spread
    over the window centres, zero (and masked out) outside them.
    """

    scores: np.ndarray
    mask: np.ndarray
    grid: np.ndarray
    stride: int
    window: int = PATCH_SIZE

    @property
    def shape(self):
        return self.scores.shape

    def window_box(self, i, j):
        return BoundingBox(int(j * self.stride), int(i * self.stride), self.window, self.window)


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    score: float


def map_from_grid(grid, height, width, stride, window=PATCH_SIZE):
    """Spread a window-score grid over the pixels at the window centres."""
    grid = np.asarray(grid, DTYPE)
    gh, gw = grid.shape
    scores = np.zeros((height, width), DTYPE)
    mask = np.zeros((height, width), bool)
    h_span, w_span = stride * (gh - 1) + 1, stride * (gw - 1) + 1
    top = left = window // 2
    scores[top:top + h_span, left:left + w_span] = bilinear_resize(grid, h_span, w_span)
    mask[top:top + h_span, left:left + w_span] = True
    return ObjectnessMap(scores, mask, grid, stride, window)


def image_windows(image, stride=4, window=PATCH_SIZE):
    """View of all stride-aligned windows, shape ``gh x gw x window x window``."""
    return sliding_window_view(image, (window, window))[::stride, ::stride]


def objectness_map_sliding(spec, params, image, stride=4, batch_size=64):
    """Score every stride-aligned 96x96 window with a patch network."""
    img = check_image(image)
    if stride < 1:
        raise RejectedInputError("stride must be >= 1")
    windows = image_windows(img, stride)
    gh, gw = windows.shape[:2]
    flat = windows.reshape(gh * gw, PATCH_SIZE, PATCH_SIZE)
    grid = np.empty(gh * gw, DTYPE)
    for s in range(0, len(flat), batch_size):
        chunk = np.ascontiguousarray(flat[s:s + batch_size])[:, None]
        grid[s:s + batch_size] = np.asarray(models.forward(spec, params, chunk)).reshape(-1)
    return map_from_grid(grid.reshape(gh, gw), *img.shape, stride)


def objectness_map_fcn(spec, params, image, exact_borders=True):
    """One full-image pass of a converted (fully convolutional) network."""
    img = check_image(image)
    if not spec.fully_convolutional:
        raise RejectedInputError("objectness_map_fcn needs a network converted with fc_to_conv")
    grid = models.full_image_forward(spec, params, img, exact_borders=exact_borders)[0]
    return map_from_grid(grid, *img.shape, models.window_stride(spec))


def _grid_proposals(omap, order):
    gw = omap.grid.shape[1]
    flat = omap.grid.ravel()
    return [Proposal(omap.window_box(int(k // gw), int(k % gw)), float(flat[k])) for k in order]


def _ranked_indices(omap):
    # stable sort keeps row-major order among equal scores
    return np.argsort(-omap.grid.ravel(), kind="stable")


def proposals_by_threshold(omap, t_o):
    """Every window scoring strictly above ``t_o``, best first (before NMS)."""
    t_o = check_unit_interval(t_o, "t_o")
    order = _ranked_indices(omap)
    keep = order[omap.grid.ravel()[order] > t_o]
    return _grid_proposals(omap, keep)


def proposals_by_ranking(omap, k):
    """The ``k`` best windows, ties broken by row-major position (before NMS)."""
    if k < 0:
        raise RejectedInputError("k must be >= 0")
    return _grid_proposals(omap, _ranked_indices(omap)[:k])


def nms(proposals, t_s=NMS_THRESHOLD):
    """Greedy non-maximum suppression; drops boxes with IoU > ``t_s`` to a kept one."""
    t_s = check_unit_interval(t_s, "t_s")
    proposals = list(proposals)
    if not proposals:
        return []
    scores = np.array([p.score for p in proposals])
    order = np.argsort(-scores, kind="stable")
    boxes = as_array([proposals[i].box for i in order])
    alive = np.ones(len(order), bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        rest = np.flatnonzero(alive[pos + 1:]) + pos + 1
        if len(rest):
            overlap = iou_matrix(boxes[pos:pos + 1], boxes[rest])[0]
            alive[rest[overlap > t_s]] = False
    return [proposals[i] for i in keep]


def extract_proposals(omap, mode="ranking", k=100, t_o=0.5, t_s=NMS_THRESHOLD, nms_first=False):
    """Thresholding or ranking followed by NMS.

    In ranking mode the top-``k`` cut happens before NMS unless
    ``nms_first`` is set, in which case NMS runs over all windows and the
    survivors are truncated to ``k``.
    """
    if mode == "threshold":
        return nms(proposals_by_threshold(omap, t_o), t_s)
    if mode != "ranking":
        raise RejectedInputError(f"unknown mode {mode!r}; expected 'threshold' or 'ranking'")
    if nms_first:
        return nms(proposals_by_ranking(omap, omap.grid.size), t_s)[:k]
    return nms(proposals_by_ranking(omap, k), t_s)


def write_proposals_csv(path, proposals):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "w", "h", "score"])
        for p in proposals:
            b = p.box
            writer.writerow([_num(b.x), _num(b.y), _num(b.w), _num(b.h), repr(float(p.score))])


def _num(v):
    return int(v) if float(v).is_integer() else repr(float(v))


def read_proposals_csv(path):
    """Parse a proposals CSV; malformed rows raise with their 1-based data row index."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "w", "h", "score"]:
            raise AnnotationParseError(f"{path}: expected header x,y,w,h,score", 0)
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                x, y, w, h, score = (float(v) for v in row)
                out.append(Proposal(BoundingBox(x, y, w, h), score))
            except (ValueError, RejectedInputError) as exc:
                raise AnnotationParseError(f"{path}: {exc}", i) from None
    return out


def quantize_map(omap):
    return np.clip(np.round(omap.scores * 255), 0, 255).astype(np.uint8)


def write_map_pgm(path, omap, png=False):
    """8-bit PGM of ``round(score * 255)``; also a PNG next to it when asked."""
    img = Image.fromarray(quantize_map(omap), mode="L")
    path = Path(path)
    img.save(path, format="PPM")
    if png:
        img.save(path.with_suffix(".png"))
