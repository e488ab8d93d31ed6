"""Labeled objectness patches from annotated images."""

from dataclasses import dataclass, field

import numpy as np

from .boxes import EPSILON, BoundingBox, as_array, iou_matrix, objectness_from_iou
from .exceptions import RejectedInputError, SamplingExhaustedError
from .models import PATCH_SIZE
from .tensor_core import DTYPE
from .validation import to_intensity

POSITIVE_IOU = 0.5
MAX_REJECTIONS = 10_000


@dataclass
class Annotation:
    """Ground truth for one image.

    ``image`` holds the pixels when they have been loaded or generated;
    ``warnings`` carries generator notes such as a reduced object count.
    """

    file: str
    width: int
    height: int
    boxes: list = field(default_factory=list)
    image: np.ndarray = field(default=None, repr=False, compare=False)
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for box in self.boxes:
            if not box.inside(self.width, self.height):
                raise RejectedInputError(f"{self.file}: box {box} exceeds {self.width}x{self.height} image")


@dataclass(frozen=True)
class LabeledPatch:
    pixels: np.ndarray
    objectness: float
    window: BoundingBox


@dataclass
class PatchSet:
    """Stacked patches with their targets and provenance."""

    patches: np.ndarray
    objectness: np.ndarray
    windows: list
    image_ids: list

    def __len__(self):
        return len(self.objectness)

    @classmethod
    def from_patches(cls, labeled, image_ids):
        if labeled:
            patches = np.stack([p.pixels for p in labeled]).astype(DTYPE)
        else:
            patches = np.zeros((0, 1, PATCH_SIZE, PATCH_SIZE), DTYPE)
        return cls(
            patches,
            np.array([p.objectness for p in labeled], DTYPE),
            [p.window for p in labeled],
            list(image_ids),
        )


def grid_windows(width, height, window=PATCH_SIZE, stride=4):
    """Top-left corners of all fully contained windows, row-major, as an ``n x 4`` array."""
    if width < window or height < window:
        return np.zeros((0, 4))
    ys = np.arange(0, height - window + 1, stride)
    xs = np.arange(0, width - window + 1, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    n = yy.size
    return np.column_stack([xx.ravel(), yy.ravel(), np.full(n, window), np.full(n, window)]).astype(np.float64)


def _crop(img, x, y, window):
    x, y = int(x), int(y)
    return img[y:y + window, x:x + window][None].copy()


def generate_positive_windows(image, boxes, window=PATCH_SIZE, stride=4, epsilon=EPSILON):
    """Best-IoU window plus every window with IoU >= 0.5, for each box.

    A window chosen for several boxes (or by both rules) is emitted once,
    labeled from its highest IoU.
    """
    img = to_intensity(image)
    h, w = img.shape
    if h < window or w < window:
        raise RejectedInputError(f"image {img.shape} is smaller than the {window}x{window} window")
    boxes = list(boxes)
    if not boxes:
        return []
    windows = grid_windows(w, h, window, stride)
    overlaps = iou_matrix(boxes, windows)
    chosen = {}
    for row in overlaps:
        picks = set(np.flatnonzero(row >= POSITIVE_IOU).tolist())
        picks.add(int(np.argmax(row)))
        for idx in picks:
            chosen[idx] = max(chosen.get(idx, 0.0), float(row[idx]))
    out = []
    for idx in sorted(chosen):
        x, y = windows[idx, :2]
        value = min(1.0, max(0.0, chosen[idx]))
        out.append(LabeledPatch(
            _crop(img, x, y, window),
            objectness_from_iou(value, epsilon),
            BoundingBox(int(x), int(y), window, window),
        ))
    return out


def sample_negative_windows(image, boxes, n=10, epsilon=EPSILON, seed=0, window=PATCH_SIZE):
    """``n`` uniformly placed windows whose IoU with every box is at most ``epsilon``."""
    img = to_intensity(image)
    h, w = img.shape
    if h < window or w < window:
        raise RejectedInputError(f"image {img.shape} is smaller than the {window}x{window} window")
    rng = np.random.default_rng(seed)
    gt = as_array(list(boxes)) if boxes else np.zeros((0, 4))
    out = []
    attempts = 0
    while len(out) < n:
        if attempts >= MAX_REJECTIONS:
            raise SamplingExhaustedError(
                f"found {len(out)} of {n} negative windows after {MAX_REJECTIONS} attempts"
            )
        attempts += 1
        x = int(rng.integers(0, w - window + 1))
        y = int(rng.integers(0, h - window + 1))
        cand = np.array([[x, y, window, window]], np.float64)
        if len(gt) and iou_matrix(cand, gt).max() > epsilon:
            continue
        out.append(LabeledPatch(_crop(img, x, y, window), 0.0, BoundingBox(x, y, window, window)))
    return out


def image_patches(annotation, seed=0, n_negative=10, stride=4, epsilon=EPSILON):
    if annotation.image is None:
        raise RejectedInputError(f"{annotation.file}: image pixels not loaded")
    positives = generate_positive_windows(annotation.image, annotation.boxes, stride=stride, epsilon=epsilon)
    negatives = sample_negative_windows(annotation.image, annotation.boxes, n_negative, epsilon, seed)
    return positives + negatives


def split_images(n, split=0.7, seed=0):
    """Shuffle image indices and cut them into train and validation parts."""
    if n < 1:
        raise RejectedInputError("need at least one image")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split * n))
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def build_patch_dataset(annotations, split=0.7, seed=0, n_negative=10, stride=4, epsilon=EPSILON):
    """Patch datasets for training and validation, split by image."""
    annotations = list(annotations)
    if not annotations:
        raise RejectedInputError("no annotations given")
    train_idx, val_idx = split_images(len(annotations), split, seed)

    def collect(indices):
        labeled, ids = [], []
        for i in indices:
            patches = image_patches(annotations[i], seed=[seed, i], n_negative=n_negative, stride=stride, epsilon=epsilon)
            labeled.extend(patches)
            ids.extend([annotations[i].file] * len(patches))
        return PatchSet.from_patches(labeled, ids)

    return collect(train_idx), collect(val_idx)
