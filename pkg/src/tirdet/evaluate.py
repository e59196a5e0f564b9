"""Detection-vs-ground-truth metrics: precision, recall, per-class AP,
mAP@0.5, PR curves, confusion matrix.

Ground truths are (n, 5) arrays of (class, x1, y1, x2, y2) in pixels.
Matching is greedy over confidence-sorted detections: a detection claims
the highest-IoU unmatched same-class gt at or above the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .postprocess import Detection, box_iou_xyxy


def iou(a, b):
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise ValueError(f"degenerate box: {tuple(a)} / {tuple(b)}")
    return box_iou_xyxy(a, b)


def gts_from_normalized(boxes, image_size):
    """(class, cx, cy, w, h) normalized rows -> (class, x1, y1, x2, y2) px."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros((0, 5))
    out = np.zeros_like(boxes)
    out[:, 0] = boxes[:, 0]
    out[:, 1] = (boxes[:, 1] - boxes[:, 3] / 2) * image_size
    out[:, 2] = (boxes[:, 2] - boxes[:, 4] / 2) * image_size
    out[:, 3] = (boxes[:, 1] + boxes[:, 3] / 2) * image_size
    out[:, 4] = (boxes[:, 2] + boxes[:, 4] / 2) * image_size
    return out


def match_detections(dets, gts, iou_thr=0.5):
    """Flag each detection TP/FP against same-class ground truths.

    dets must arrive sorted by confidence descending. Each gt is claimed at
    most once, by the earliest detection whose IoU with it is the best
    among its unmatched same-class gts and >= iou_thr. Returns
    (flags, n_unmatched_gts).
    """
    confs = [d.confidence for d in dets]
    if any(confs[i] < confs[i + 1] for i in range(len(confs) - 1)):
        raise ValueError("detections must be sorted by confidence descending")
    gts = np.asarray(gts, dtype=np.float64)
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for d in dets:
        best, best_i = 0.0, -1
        for gi in range(len(gts)):
            if taken[gi] or int(gts[gi, 0]) != d.class_id:
                continue
            v = box_iou_xyxy((d.x1, d.y1, d.x2, d.y2), gts[gi, 1:])
            if v > best:
                best, best_i = v, gi
        if best_i >= 0 and best >= iou_thr:
            taken[best_i] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, int(len(gts) - taken.sum())


@dataclass
class PRCurve:
    confidences: np.ndarray
    precision: np.ndarray      # cumulative at each confidence cut
    recall: np.ndarray
    n_gt: int
    recall_undefined: bool = False   # n_gt == 0 with detections present

    def summary_point(self):
        """Operating point at the F1-maximizing confidence cut."""
        if len(self.precision) == 0:
            # empty-detection convention: precision 1, recall 0
            return 1.0, 0.0, 0.0
        f1 = 2 * self.precision * self.recall \
            / np.maximum(self.precision + self.recall, 1e-12)
        i = int(np.argmax(f1))
        return (float(self.precision[i]), float(self.recall[i]),
                float(f1[i]))


def precision_recall(flags, n_gt, confidences=None) -> PRCurve:
    """Cumulative precision/recall over confidence-ordered TP/FP flags."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    flags = [bool(f) for f in flags]
    if confidences is None:
        confidences = np.linspace(1.0, 0.0, num=len(flags), endpoint=False)
    confidences = np.asarray(confidences, dtype=np.float64)
    tp = np.cumsum(flags) if flags else np.zeros(0)
    k = np.arange(1, len(flags) + 1)
    precision = tp / k if len(flags) else np.zeros(0)
    undefined = n_gt == 0 and len(flags) > 0
    recall = tp / n_gt if n_gt > 0 else np.zeros(len(flags))
    return PRCurve(confidences=confidences, precision=precision,
                   recall=recall, n_gt=n_gt, recall_undefined=undefined)


def average_precision(curve: PRCurve):
    """Area under the monotone precision envelope of the PR curve,
    continuous all-point integration."""
    if len(curve.precision) == 0 or curve.n_gt == 0:
        return 0.0
    recall = np.concatenate([[0.0], curve.recall])
    precision = np.concatenate([[1.0], curve.precision])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def map_at_50(per_class_aps):
    """Arithmetic mean of per-class average precisions."""
    aps = list(per_class_aps.values()) \
        if isinstance(per_class_aps, dict) else list(per_class_aps)
    if not aps:
        raise ValueError("need at least one class AP")
    return float(np.mean(aps))


def confusion_matrix(dets, gts, iou_thr=0.5, conf_thr=0.25, num_classes=None):
    """(C+1) x (C+1) counts: rows are gt classes (last row: spurious
    detections), columns are predicted classes (last column: missed gts).
    Matching is class-agnostic so misclassifications land off-diagonal."""
    gts = np.asarray(gts, dtype=np.float64)
    if num_classes is None:
        ids = [int(g) for g in gts[:, 0]] if len(gts) else []
        ids += [d.class_id for d in dets]
        num_classes = max(ids) + 1 if ids else 1
    m = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    strong = sorted([d for d in dets if d.confidence >= conf_thr],
                    key=lambda d: -d.confidence)
    taken = np.zeros(len(gts), dtype=bool)
    for d in strong:
        best, best_i = 0.0, -1
        for gi in range(len(gts)):
            if taken[gi]:
                continue
            v = box_iou_xyxy((d.x1, d.y1, d.x2, d.y2), gts[gi, 1:])
            if v > best:
                best, best_i = v, gi
        if best_i >= 0 and best >= iou_thr:
            taken[best_i] = True
            m[int(gts[best_i, 0]), d.class_id] += 1
        else:
            m[num_classes, d.class_id] += 1      # spurious detection
    for gi in range(len(gts)):
        if not taken[gi]:
            m[int(gts[gi, 0]), num_classes] += 1  # missed gt
    return m


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    ap: float
    n_gt: int
    n_det: int


@dataclass
class EvalReport:
    per_class: dict                      # class id -> ClassMetrics
    map50: float
    confusion: np.ndarray
    tp: int
    fp: int
    fn: int
    curves: dict = field(default_factory=dict)   # class id -> PRCurve
    class_names: list = field(default_factory=list)

    def to_dict(self):
        return {
            "map50": self.map50,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "per_class": {
                str(c): {"precision": m.precision, "recall": m.recall,
                         "ap": m.ap, "n_gt": m.n_gt, "n_det": m.n_det}
                for c, m in sorted(self.per_class.items())},
            "confusion": self.confusion.tolist(),
            "class_names": list(self.class_names),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate_detections(per_image_dets, per_image_gts, num_classes,
                        iou_thr=0.5, conf_thr=0.25,
                        class_names=()) -> EvalReport:
    """Aggregate matching across a dataset into the full report.

    per_image_dets: list over images of detection lists; per_image_gts:
    aligned list of (n, 5) gt arrays. mAP averages the AP of classes that
    actually occur in the ground truth.
    """
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError("detections/ground-truth image counts differ")
    records = {c: [] for c in range(num_classes)}   # (conf, is_tp)
    n_gt = {c: 0 for c in range(num_classes)}
    total_conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    tp = fp = fn = 0
    for dets, gts in zip(per_image_dets, per_image_gts):
        gts = np.asarray(gts, dtype=np.float64)
        dets_sorted = sorted(dets, key=lambda d: -d.confidence)
        flags, unmatched = match_detections(dets_sorted, gts, iou_thr)
        fn += unmatched
        for d, f in zip(dets_sorted, flags):
            records[d.class_id].append((d.confidence, f))
            tp += bool(f)
            fp += not f
        for g in gts:
            n_gt[int(g[0])] += 1
        total_conf += confusion_matrix(dets, gts, iou_thr, conf_thr,
                                       num_classes)
    per_class, curves = {}, {}
    for c in range(num_classes):
        recs = sorted(records[c], key=lambda t: -t[0])
        curve = precision_recall([f for _, f in recs], n_gt[c],
                                 confidences=[v for v, _ in recs])
        p, r, _ = curve.summary_point()
        per_class[c] = ClassMetrics(precision=p, recall=r,
                                    ap=average_precision(curve),
                                    n_gt=n_gt[c], n_det=len(recs))
        curves[c] = curve
    present = [c for c in per_class if per_class[c].n_gt > 0]
    map50 = map_at_50({c: per_class[c].ap for c in present}) \
        if present else 0.0
    return EvalReport(per_class=per_class, map50=map50,
                      confusion=total_conf, tp=tp, fp=fp, fn=fn,
                      curves=curves, class_names=list(class_names))
