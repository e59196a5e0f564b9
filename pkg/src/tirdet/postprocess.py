"""Raw head outputs to final detections: decode, threshold, suppress."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .graph import STRIDES, ShapeError


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float
    class_id: int

    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_dict(self):
        return {"box": [self.x1, self.y1, self.x2, self.y2],
                "confidence": self.confidence, "class_id": self.class_id}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_predictions(grids, anchors: AnchorSet, conf_threshold=0.001,
                       max_dets=None):
    """Decode one image's raw per-level grids into detections.

    grids: {level: (ny, nx, na, 5+nc)} raw logits. Confidence is
    sigmoid(objectness) * max sigmoid(class); slots under conf_threshold
    are dropped; class is the argmax. max_dets, when set, keeps only the
    top-confidence slots (evaluation throughput guard).
    """
    dets = []
    for lv, grid in grids.items():
        grid = np.asarray(grid)
        if grid.ndim != 4 or grid.shape[-1] < 6:
            raise ShapeError(f"{lv}: expected (ny, nx, na, 5+nc), "
                             f"got {grid.shape}")
        ny, nx, na, no = grid.shape
        level_anchors = anchors.per_level[lv]
        if len(level_anchors) != na:
            raise ShapeError(f"{lv}: {na} anchor slots vs "
                             f"{len(level_anchors)} anchors")
        stride = STRIDES[lv]
        sig = _sigmoid(grid)
        conf = sig[..., 4] * sig[..., 5:].max(axis=-1)
        rr, cc, aa = np.nonzero(conf >= conf_threshold)
        if len(rr) == 0:
            continue
        anchor_arr = np.asarray(level_anchors)
        s = sig[rr, cc, aa]
        cx = (2.0 * s[:, 0] - 0.5 + cc) * stride
        cy = (2.0 * s[:, 1] - 0.5 + rr) * stride
        w = (2.0 * s[:, 2]) ** 2 * anchor_arr[aa, 0]
        h = (2.0 * s[:, 3]) ** 2 * anchor_arr[aa, 1]
        cls_id = np.argmax(grid[rr, cc, aa, 5:], axis=-1)
        kept_conf = conf[rr, cc, aa]
        dets += [Detection(x1=float(x - ww / 2), y1=float(y - hh / 2),
                           x2=float(x + ww / 2), y2=float(y + hh / 2),
                           confidence=float(cf), class_id=int(ci))
                 for x, y, ww, hh, cf, ci
                 in zip(cx, cy, w, h, kept_conf, cls_id)]
    if max_dets is not None and len(dets) > max_dets:
        dets.sort(key=_det_order)
        dets = dets[:max_dets]
    return dets


def box_iou_xyxy(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) \
        + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _det_order(d: Detection):
    return (-d.confidence, d.class_id, d.x1, d.y1)


def nms(dets, iou_threshold=0.45):
    """Greedy per-class suppression: keep the highest-confidence box, drop
    same-class boxes overlapping it beyond the threshold. Output sorted by
    confidence descending, ties broken by (class_id, x1, y1)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} not in (0, 1)")
    remaining = sorted(dets, key=_det_order)
    if not remaining:
        return []
    boxes = np.array([(d.x1, d.y1, d.x2, d.y2) for d in remaining],
                     dtype=np.float64)
    classes = np.array([d.class_id for d in remaining])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(len(remaining), dtype=bool)
    kept = []
    for i, d in enumerate(remaining):
        if suppressed[i]:
            continue
        kept.append(d)
        rest = np.nonzero(~suppressed[i + 1:])[0] + i + 1
        rest = rest[classes[rest] == d.class_id]
        if len(rest) == 0:
            continue
        iw = np.clip(np.minimum(boxes[rest, 2], boxes[i, 2])
                     - np.maximum(boxes[rest, 0], boxes[i, 0]), 0, None)
        ih = np.clip(np.minimum(boxes[rest, 3], boxes[i, 3])
                     - np.maximum(boxes[rest, 1], boxes[i, 1]), 0, None)
        inter = iw * ih
        union = areas[rest] + areas[i] - inter
        iou_vals = np.divide(inter, union, out=np.zeros_like(inter),
                             where=union > 0)
        suppressed[rest[iou_vals > iou_threshold]] = True
    return kept


def write_detections_jsonl(path, per_image):
    """per_image: iterable of (image_id, list of Detection)."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for image_id, dets in per_image:
            for d in dets:
                rec = {"image": str(image_id), **d.to_dict()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
