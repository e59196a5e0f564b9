"""Prediction decoding and non-maximum suppression vs brute-force oracle."""

import numpy as np
import pytest

from tirdet.anchors import default_anchors
from tirdet.postprocess import (Detection, box_iou_xyxy, decode_predictions,
                                nms, write_detections_jsonl)

ASET = default_anchors(["P3"])


def test_decode_everything_suppressed():
    grids = {"P3": np.full((4, 4, 3, 9), -40.0)}
    assert decode_predictions(grids, ASET, conf_threshold=0.001) == []


def test_decode_zero_threshold_keeps_all_slots(rng):
    grids = {"P3": rng.normal(size=(4, 4, 3, 9))}
    dets = decode_predictions(grids, ASET, conf_threshold=0.0)
    assert len(dets) == 4 * 4 * 3


def test_decode_respects_threshold(rng):
    for _ in range(20):
        grids = {"P3": rng.normal(scale=2, size=(6, 6, 3, 9))}
        thr = float(rng.uniform(0.05, 0.6))
        dets = decode_predictions(grids, ASET, conf_threshold=thr)
        assert all(d.confidence >= thr for d in dets)
        total = decode_predictions(grids, ASET, conf_threshold=0.0)
        assert sum(d.confidence >= thr for d in total) == len(dets)


def test_decode_box_geometry():
    grids = {"P3": np.zeros((2, 2, 3, 9))}
    grids["P3"][..., 4] = 10.0
    grids["P3"][..., 5] = 10.0
    dets = decode_predictions(grids, ASET, conf_threshold=0.5)
    assert len(dets) == 12
    d = next(d for d in dets
             if abs((d.x1 + d.x2) / 2 - 4.0) < 1e-6
             and abs((d.x2 - d.x1) - 10.0) < 1e-6)
    assert abs((d.y1 + d.y2) / 2 - 4.0) < 1e-6   # cell (0,0) center at zero logits


def test_nms_keeps_higher_confidence_duplicate():
    a = Detection(0, 0, 10, 10, 0.9, 0)
    b = Detection(0, 0, 10, 10, 0.8, 0)
    assert nms([b, a], 0.45) == [a]


def test_nms_is_per_class():
    a = Detection(0, 0, 10, 10, 0.9, 0)
    b = Detection(0, 0, 10, 10, 0.8, 1)
    assert nms([a, b], 0.45) == [a, b]


def test_nms_idempotent(rng):
    dets = random_detections(rng, n_max=30)
    once = nms(dets, 0.45)
    assert nms(once, 0.45) == once


def brute_force_nms(dets, thr):
    """Independent re-simulation: repeatedly take the global best remaining
    detection, discard same-class overlaps."""
    remaining = list(dets)
    kept = []
    while remaining:
        best = min(remaining, key=lambda d: (-d.confidence, d.class_id,
                                             d.x1, d.y1))
        kept.append(best)
        nxt = []
        for o in remaining:
            if o is best:
                continue
            if o.class_id == best.class_id and box_iou_xyxy(
                    (best.x1, best.y1, best.x2, best.y2),
                    (o.x1, o.y1, o.x2, o.y2)) > thr:
                continue
            nxt.append(o)
        remaining = nxt
    return kept


def random_detections(rng, n_max=10, classes=3, span=40):
    n = int(rng.integers(0, n_max + 1))
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, span, 2)
        w, h = rng.uniform(1, span / 2, 2)
        out.append(Detection(float(x1), float(y1), float(x1 + w),
                             float(y1 + h), float(rng.random()),
                             int(rng.integers(0, classes))))
    return out


def test_nms_matches_brute_force(rng):
    for _ in range(500):
        dets = random_detections(rng)
        thr = float(rng.uniform(0.2, 0.7))
        assert nms(dets, thr) == brute_force_nms(dets, thr)


def test_nms_survivors_no_overlap(rng):
    for _ in range(100):
        kept = nms(random_detections(rng), 0.45)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert box_iou_xyxy((a.x1, a.y1, a.x2, a.y2),
                                        (b.x1, b.y1, b.x2, b.y2)) <= 0.45
        confs = [d.confidence for d in kept]
        assert confs == sorted(confs, reverse=True)


def test_nms_threshold_validation():
    with pytest.raises(ValueError):
        nms([], 0.0)
    with pytest.raises(ValueError):
        nms([], 1.0)


def test_detections_jsonl(tmp_path):
    import json
    d = Detection(1.0, 2.0, 3.0, 4.0, 0.75, 2)
    path = tmp_path / "dets.jsonl"
    write_detections_jsonl(path, [("img_0", [d]), ("img_1", [])])
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["image"] == "img_0" and rec["class_id"] == 2
    assert rec["box"] == [1.0, 2.0, 3.0, 4.0]
