"""Keypoint localization metrics (MPK, MRK, APK) and classification accuracy.

A predicted keypoint is correct when it lies within ``alpha`` times the larger
bounding-box side of the ground-truth keypoint of the same part. Parts are
identified, so no assignment between predictions and annotations is needed.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationError, InputError
from .geometry import receptive_field
from .localization import MISSING


@dataclass(frozen=True)
class KeypointMatchConfig:
    alpha: float = 0.1
    rule: str = "bbox_max"  # "bbox_max": alpha·max(w, h); "pixels": alpha is the radius

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.rule not in ("bbox_max", "pixels"):
            raise ValueError(f"unknown distance rule {self.rule!r}")

    def threshold(self, bbox):
        if self.rule == "pixels":
            return self.alpha
        return self.alpha * max(bbox[2], bbox[3])


def grid_to_pixels(loc, geom):
    """Map grid coordinates to input pixels: part → (x, y), MISSING passes through.

    Grid (h, w) sits at pixel y = offset + stride·h, x = offset + stride·w.
    """
    _, stride, offset = receptive_field(geom)
    out = {}
    for part, hw in loc:
        out[part] = MISSING if hw is MISSING else (offset + stride * hw[1], offset + stride * hw[0])
    return out


def _gt_table(gt):
    """part → (x, y, visible) from [(part, x, y, vis)] or an [M, 3] array."""
    if isinstance(gt, dict):
        return gt
    arr = np.asarray(gt, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 3:
        return {p + 1: (x, y, bool(v)) for p, (x, y, v) in enumerate(arr)}
    return {int(p): (float(x), float(y), bool(v)) for p, x, y, v in gt}


def _correct(pred_xy, gt_entry, bbox, cfg):
    x, y, vis = gt_entry
    if not vis:
        return False
    return float(np.hypot(pred_xy[0] - x, pred_xy[1] - y)) <= cfg.threshold(bbox)


def image_counts(pred, gt, bbox, cfg=KeypointMatchConfig()):
    """(n_tp, n_pd, n_gt) for one image."""
    table = _gt_table(gt)
    n_gt = sum(1 for e in table.values() if e[2])
    n_pd = n_tp = 0
    for part, xy in pred.items():
        if xy is MISSING or xy is None:
            continue
        if part not in table:
            raise AnnotationError(f"part {part} predicted but never annotated")
        n_pd += 1
        n_tp += _correct(xy[:2], table[part], bbox, cfg)
    return n_tp, n_pd, n_gt


def mpk_mrk(predictions, ground_truth, bboxes, cfg=KeypointMatchConfig()):
    """Mean per-image keypoint precision and recall.

    Args:
        predictions: per image, a dict part → (x, y) in pixels or MISSING.
        ground_truth: per image, [(part, x, y, visible)] or an [M, 3] array.
        bboxes: per image (x, y, w, h).

    An image without predictions scores precision 1 if nothing was annotated
    and 0 otherwise; an image without visible annotations scores recall 1.
    """
    if not (len(predictions) == len(ground_truth) == len(bboxes)):
        raise InputError("predictions, ground truth and bboxes must align per image")
    if not predictions:
        raise InputError("no images to evaluate")
    precisions, recalls = [], []
    for pred, gt, bbox in zip(predictions, ground_truth, bboxes):
        n_tp, n_pd, n_gt = image_counts(pred, gt, bbox, cfg)
        precisions.append(n_tp / n_pd if n_pd else float(n_gt == 0))
        recalls.append(n_tp / n_gt if n_gt else 1.0)
    return float(np.mean(precisions)), float(np.mean(recalls))


def average_precision(scored, n_gt):
    """AP over (score, correct) pairs, averaging precision at every true positive.

    Ties in score keep input order. Returns 0 when ``n_gt`` is 0.
    """
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    tp, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if scored[i][1]:
            tp += 1
            total += tp / rank
    return total / n_gt


def apk(predictions, ground_truth, bboxes, cfg=KeypointMatchConfig()):
    """Per-part and pooled average precision of keypoints.

    Args:
        predictions: per image, a dict part → (x, y, score); MISSING entries
            are skipped.
        ground_truth, bboxes: as in ``mpk_mrk``.

    Returns:
        (per_part, overall): per_part maps each part with at least one visible
        annotation to its AP; overall pools all parts into one ranking.
    """
    if not (len(predictions) == len(ground_truth) == len(bboxes)):
        raise InputError("predictions, ground truth and bboxes must align per image")
    scored, n_gt = {}, {}
    for pred, gt, bbox in zip(predictions, ground_truth, bboxes):
        table = _gt_table(gt)
        for part, entry in table.items():
            if entry[2]:
                n_gt[part] = n_gt.get(part, 0) + 1
        for part, p in pred.items():
            if p is MISSING or p is None:
                continue
            if len(p) < 3 or p[2] is None:
                raise InputError(f"prediction for part {part} carries no confidence score")
            if part not in table:
                raise AnnotationError(f"part {part} predicted but never annotated")
            scored.setdefault(part, []).append((float(p[2]), _correct(p[:2], table[part], bbox, cfg)))
    per_part = {part: average_precision(scored.get(part, []), n_gt[part]) for part in sorted(n_gt)}
    pooled = [s for part in sorted(scored) for s in scored[part]]
    overall = average_precision(pooled, sum(n_gt.values()))
    return per_part, overall


@dataclass
class LocalizationReport:
    mpk: float
    mrk: float
    apk: float
    apk_per_part: dict = field(default_factory=dict)
    part_names: dict = field(default_factory=dict)

    def ranked_parts(self):
        """Parts ordered by descending APK, ties by part id."""
        return sorted(self.apk_per_part, key=lambda p: (-self.apk_per_part[p], p))

    def to_dict(self):
        return {
            "mpk": self.mpk,
            "mrk": self.mrk,
            "apk": self.apk,
            "apk_per_part": {str(k): v for k, v in sorted(self.apk_per_part.items())},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_table(self, label="model"):
        return format_table(["Model architecture", "MPK", "MRK", "APK"], [[label, pct(self.mpk), pct(self.mrk), pct(self.apk)]])

    def part_table(self):
        names = [self.part_names.get(p, f"part {p}") for p in self.ranked_parts()] + ["overall"]
        values = [f"{self.apk_per_part[p]:.3f}" for p in self.ranked_parts()] + [f"{self.apk:.3f}"]
        return format_table(["part"] + names, [["APK"] + values])


def pct(x):
    return f"{100 * x:.1f}"


def format_table(headers, rows):
    """Plain-text table with ``|`` separated, width-aligned columns."""
    cols = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(headers))]
    lines = []
    for k, r in enumerate(cols):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def evaluate_localization(locations, keypoints, bboxes, geom, cfg=KeypointMatchConfig()):
    """LocalizationReport for inferred grid locations against pixel keypoints.

    MPK/MRK use the thresholded locations. APK ranks every part's argmax by
    its peak response, including parts that fell below the threshold, so the
    threshold is swept rather than fixed.
    """
    _, stride, offset = receptive_field(geom)
    preds, scored = [], []
    for loc in locations:
        preds.append(grid_to_pixels(loc, geom))
        raw = loc.argmax or {p: hw for p, hw in loc if hw is not MISSING}
        scored.append(
            {p: (offset + stride * hw[1], offset + stride * hw[0], loc.scores.get(p)) for p, hw in raw.items()}
        )
    mpk, mrk = mpk_mrk(preds, keypoints, bboxes, cfg)
    per_part, overall = apk(scored, keypoints, bboxes, cfg)
    return LocalizationReport(mpk, mrk, overall, per_part)


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels)) if len(labels) else 0.0


def confusion_matrix(pred, labels, num_classes):
    """Row = true class, column = predicted class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm
