"""Recall, recall curves and timing for any proposal generator.

A *generator* is a callable ``generator(annotation, value) -> list[Proposal]``
where ``value`` is the swept parameter (``k`` or ``T_o``). Map-based
generators cache the objectness map per image so a sweep computes it once.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import as_array, iou_matrix
from .exceptions import RejectedInputError
from .proposals import NMS_THRESHOLD, Proposal, extract_proposals, read_proposals_csv

logger = logging.getLogger(__name__)

MATCH_THRESHOLD = 0.5


@dataclass
class EvalResult:
    method: str = ""
    parameter: object = None
    matched: list = field(default_factory=list)
    gt_counts: list = field(default_factory=list)
    proposal_counts: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def per_image_recall(self):
        return [100.0 * m / g for m, g in zip(self.matched, self.gt_counts) if g > 0]

    @property
    def mean_recall(self):
        """Macro-averaged recall in percent; NaN when no image has ground truth."""
        r = self.per_image_recall
        return float(np.mean(r)) if r else float("nan")

    @property
    def mean_num_proposals(self):
        return float(np.mean(self.proposal_counts)) if self.proposal_counts else 0.0


def matched_mask(proposals, ground_truth, t_d=MATCH_THRESHOLD):
    """Which ground-truth boxes have at least one proposal with IoU > ``t_d``."""
    gt = list(ground_truth)
    if not gt:
        return np.zeros(0, bool)
    boxes = [p.box if isinstance(p, Proposal) else p for p in proposals]
    if not boxes:
        return np.zeros(len(gt), bool)
    return (iou_matrix(as_array(gt), as_array(boxes)) > t_d).any(axis=1)


def match_and_recall(proposals_per_image, gt_per_image, t_d=MATCH_THRESHOLD, method="", parameter=None):
    if len(proposals_per_image) != len(gt_per_image):
        raise RejectedInputError("need one proposal list per image")
    if not gt_per_image:
        raise RejectedInputError("image set is empty")
    result = EvalResult(method, parameter)
    for props, gt in zip(proposals_per_image, gt_per_image):
        result.matched.append(int(matched_mask(props, gt, t_d).sum()))
        result.gt_counts.append(len(gt))
        result.proposal_counts.append(len(props))
    return result


def recall_curve(generator, annotations, sweep, t_d=MATCH_THRESHOLD, method=""):
    """Evaluate ``generator`` for every value of ``sweep``.

    An exception raised for one image is logged and stored in
    ``EvalResult.failures``; that image is left out of the statistics and
    the evaluation moves on.
    """
    sweep = list(sweep)
    if not sweep:
        raise RejectedInputError("parameter sweep is empty")
    results = []
    for value in sweep:
        props, gts, failures = [], [], []
        for i, ann in enumerate(annotations):
            try:
                props.append(generator(ann, value))
            except Exception as exc:  # surfaced to the caller, never fatal
                logger.warning("%s failed on %s at %s: %s", method or "generator", ann.file, value, exc)
                failures.append((i, ann.file, repr(exc)))
                continue
            gts.append(ann.boxes)
        if gts:
            result = match_and_recall(props, gts, t_d, method, value)
        else:
            result = EvalResult(method, value)
        result.failures = failures
        results.append(result)
    return results


class MapProposalGenerator:
    """Generator over a per-image objectness map with extraction + NMS.

    ``map_fn(image) -> ObjectnessMap``; maps are cached by image file name.
    """

    def __init__(self, map_fn, mode="ranking", t_s=NMS_THRESHOLD, nms_first=False, cache=True):
        if mode not in ("ranking", "threshold"):
            raise RejectedInputError(f"unknown mode {mode!r}")
        self.map_fn = map_fn
        self.mode = mode
        self.t_s = t_s
        self.nms_first = nms_first
        self._cache = {} if cache else None

    def objectness_map(self, ann):
        if self._cache is None:
            return self.map_fn(ann.image)
        key = ann.file
        if key not in self._cache:
            self._cache[key] = self.map_fn(ann.image)
        return self._cache[key]

    def precompute(self, annotations, workers=1):
        """Fill the map cache, ``workers`` images at a time; failures are left for the sweep."""
        if self._cache is None:
            return

        def one(ann):
            try:
                return ann.file, self.map_fn(ann.image)
            except Exception:  # re-raised and recorded when the sweep reaches this image
                return ann.file, None

        todo = [a for a in annotations if a.file not in self._cache]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                done = list(pool.map(one, todo))
        else:
            done = [one(a) for a in todo]
        self._cache.update((k, m) for k, m in done if m is not None)

    def __call__(self, ann, value):
        omap = self.objectness_map(ann)
        if self.mode == "ranking":
            return extract_proposals(omap, "ranking", k=int(value), t_s=self.t_s, nms_first=self.nms_first)
        return extract_proposals(omap, "threshold", t_o=float(value), t_s=self.t_s)


class ExternalProposalGenerator:
    """Proposals produced elsewhere, keyed by image file stem.

    In ranking mode the imported set is sorted by score (stable) and
    truncated to ``k``; ``None`` keeps the full set.
    """

    def __init__(self, proposals_by_image):
        self.proposals = dict(proposals_by_image)

    def __call__(self, ann, value=None):
        key = Path(ann.file).stem
        if key not in self.proposals:
            raise KeyError(f"no imported proposals for image {ann.file}")
        props = self.proposals[key]
        if value is None:
            return list(props)
        order = np.argsort([-p.score for p in props], kind="stable")
        return [props[i] for i in order[:int(value)]]


def import_external_proposals(path):
    """Load ``<stem>.csv`` files (or a single CSV) in the proposals exchange format."""
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no proposal CSV files under {path}")
    return {f.stem: read_proposals_csv(f) for f in files}


def curve_filename(prefix, mode, t_d=MATCH_THRESHOLD, t_s=NMS_THRESHOLD):
    if mode == "ranking":
        return f"{prefix}-topKVsRecallAtIoU{t_d:.2f}NMS{t_s:.2f}.csv"
    return f"{prefix}-thresholdVsRecallAtIoU{t_d:.2f}NMS{t_s:.2f}.csv"


def write_curve_csv(path, results, parameter_name):
    """Whitespace-separated ``<parameter> meanRecall meanNumProposals`` table."""
    lines = [f"{parameter_name} meanRecall meanNumProposals"]
    for r in results:
        lines.append(f"{r.parameter} {r.mean_recall:.6f} {r.mean_num_proposals:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path):
    rows = Path(path).read_text().split("\n")
    header = rows[0].split()
    data = [tuple(float(v) for v in line.split()) for line in rows[1:] if line.strip()]
    return header, data


@dataclass
class TimingResult:
    method: str
    mean_s: float
    std_s: float
    n_images: int

    def as_dict(self):
        return {"method": self.method, "mean_s": self.mean_s, "std_s": self.std_s, "n_images": self.n_images}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=1) + "\n")


def timing_bench(pipeline, images, repetitions=3, method=""):
    """Seconds per image for ``pipeline(image)`` over ``repetitions`` passes.

    One untimed warm-up call on the first image precedes the measurements.
    Each per-image wall-clock time is one sample for the mean and std.
    """
    if repetitions < 3:
        raise RejectedInputError("repetitions must be >= 3")
    images = list(images)
    if not images:
        raise RejectedInputError("image set is empty")
    pipeline(images[0])
    samples = []
    for _ in range(repetitions):
        for img in images:
            start = time.perf_counter()
            pipeline(img)
            samples.append(time.perf_counter() - start)
    return TimingResult(method, float(np.mean(samples)), float(np.std(samples)), len(images))
