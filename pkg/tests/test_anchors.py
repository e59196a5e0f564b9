"""Anchor defaults, box decoding, target assignment vs brute-force oracle."""

import math

import numpy as np
import pytest

from tirdet.anchors import (AnchorSet, BBox, ConfigError, assign_targets,
                            decode_box, default_anchors, shape_ratio)

GRIDS_640 = {"P3": (80, 80), "P4": (40, 40), "P5": (20, 20)}
GRIDS_640_P2 = {"P2": (160, 160), **GRIDS_640}


def test_default_anchor_areas_increase_with_level():
    aset = default_anchors(["P3", "P4", "P5"])
    assert set(aset.per_level) == {"P3", "P4", "P5"}
    means = [np.mean([w * h for w, h in aset.per_level[lv]])
             for lv in ("P3", "P4", "P5")]
    assert means[0] < means[1] < means[2]
    for lv in aset.per_level:
        assert len(aset.per_level[lv]) == 3
        assert all(w > 0 and h > 0 for w, h in aset.per_level[lv])


def test_p2_anchors_are_halved_p3():
    aset = default_anchors(["P2", "P3", "P4", "P5"])
    p2 = np.array(aset.per_level["P2"])
    p3 = np.array(aset.per_level["P3"])
    assert np.allclose(p2 * 2, p3)
    assert np.allclose([w * h for w, h in p2],
                       [w * h / 4 for w, h in p3])


def test_empty_level_set_rejected():
    with pytest.raises(ConfigError):
        default_anchors([])


def test_anchor_ordering_enforced():
    with pytest.raises(ConfigError):
        AnchorSet(per_level={"P3": ((33.0, 23.0), (10.0, 13.0))})


def test_decode_zero_logits_is_fixed_point():
    cx, cy, w, h = decode_box((0, 0, 0, 0), cell=(0, 0), anchor=(16, 30),
                              stride=8)
    assert (cx, cy) == (4.0, 4.0)
    assert (w, h) == (16.0, 30.0)


def test_decode_size_saturates_at_4x_anchor():
    _, _, w, h = decode_box((0, 0, 40.0, 40.0), cell=(0, 0), anchor=(16, 30),
                            stride=8)
    assert abs(w - 64.0) < 1e-9 and abs(h - 120.0) < 1e-9
    _, _, w, h = decode_box((0, 0, -40.0, -40.0), cell=(0, 0), anchor=(16, 30),
                            stride=8)
    assert 0 < w < 1e-15 * 64 + 1e-9 and 0 < h


def test_decode_matches_direct_formula(rng):
    for _ in range(200):
        raw = rng.normal(scale=2.0, size=4)
        cell = (int(rng.integers(0, 20)), int(rng.integers(0, 20)))
        anchor = tuple(rng.uniform(4, 200, size=2))
        stride = int(rng.choice([4, 8, 16, 32]))
        cx, cy, w, h = decode_box(raw, cell, anchor, stride)
        sig = lambda t: 1.0 / (1.0 + math.exp(-t))
        assert abs(cx - (2 * sig(raw[0]) - 0.5 + cell[1]) * stride) < 1e-12
        assert abs(cy - (2 * sig(raw[1]) - 0.5 + cell[0]) * stride) < 1e-12
        assert abs(w - (2 * sig(raw[2])) ** 2 * anchor[0]) < 1e-12
        assert abs(h - (2 * sig(raw[3])) ** 2 * anchor[1]) < 1e-12
        # bounds from the decode form
        assert -0.5 * stride < cx < (cell[1] + 1.5) * stride
        assert 0 < w <= 4 * anchor[0] and 0 < h <= 4 * anchor[1]


def test_decode_monotone_in_size_logit(rng):
    for _ in range(50):
        t = rng.normal(scale=3.0, size=4)
        _, _, w0, _ = decode_box(t, (0, 0), (16, 30), 8)
        t2 = t.copy()
        t2[2] += abs(rng.normal())
        _, _, w1, _ = decode_box(t2, (0, 0), (16, 30), 8)
        assert w1 >= w0


def test_ratio_rule_examples():
    # 20x20 gt vs 16x30 anchor: worst ratio 1.5 -> matched
    assert shape_ratio((20, 20), (16, 30)) == 1.5
    aset = AnchorSet(per_level={"P3": ((16.0, 30.0),)})
    gt = BBox(cx=0.5, cy=0.5, w=20 / 640, h=20 / 640, class_id=0)
    asn, unmatched = assign_targets([gt], aset, {"P3": (80, 80)})
    assert asn and not unmatched
    # 4x4 gt vs 116x90 anchor: ratio 29 -> unmatched
    assert shape_ratio((4, 4), (116, 90)) == 29.0
    aset2 = AnchorSet(per_level={"P5": ((116.0, 90.0),)})
    gt2 = BBox(cx=0.5, cy=0.5, w=4 / 640, h=4 / 640, class_id=0)
    asn2, unmatched2 = assign_targets([gt2], aset2, {"P5": (20, 20)})
    assert not asn2 and unmatched2 == [gt2]


def test_ratio_rule_scale_invariance(rng):
    for _ in range(100):
        gw, gh = rng.uniform(2, 300, size=2)
        aw, ah = rng.uniform(2, 300, size=2)
        k = rng.uniform(0.1, 10)
        r1 = shape_ratio((gw, gh), (aw, ah))
        r2 = shape_ratio((gw * k, gh * k), (aw * k, ah * k))
        assert abs(r1 - r2) < 1e-9 * max(r1, r2)


def test_neighbor_replication_cases():
    aset = AnchorSet(per_level={"P3": ((16.0, 16.0),)})
    grids = {"P3": (80, 80)}
    # grid-line center (fractions 0.0): home + left + up = 3 cells
    gt = BBox(cx=40 * 8 / 640, cy=40 * 8 / 640, w=16 / 640, h=16 / 640,
              class_id=0)
    asn, _ = assign_targets([gt], aset, grids)
    assert len(asn) == 3
    assert {a.cell for a in asn} == {(40, 40), (40, 39), (39, 40)}
    # exact cell-center fractions (0.5): tie rule adds no neighbors
    gt = BBox(cx=40.5 * 8 / 640, cy=40.5 * 8 / 640, w=16 / 640, h=16 / 640,
              class_id=0)
    asn, _ = assign_targets([gt], aset, grids)
    assert len(asn) == 1 and asn[0].cell == (40, 40)
    # generic interior point: home + one x-neighbor + one y-neighbor
    gt = BBox(cx=40.25 * 8 / 640, cy=40.75 * 8 / 640, w=16 / 640, h=16 / 640,
              class_id=0)
    asn, _ = assign_targets([gt], aset, grids)
    assert len(asn) == 3
    assert {a.cell for a in asn} == {(40, 40), (40, 39), (41, 40)}


def test_offsets_stay_decodable(rng):
    aset = default_anchors(["P2", "P3", "P4", "P5"])
    for _ in range(50):
        gt = BBox(cx=float(rng.uniform(0.05, 0.95)),
                  cy=float(rng.uniform(0.05, 0.95)),
                  w=float(rng.uniform(0.01, 0.4)),
                  h=float(rng.uniform(0.01, 0.4)), class_id=0)
        asn, _ = assign_targets([gt], aset, GRIDS_640_P2)
        for a in asn:
            assert -0.5 < a.offsets[0] < 1.5
            assert -0.5 < a.offsets[1] < 1.5


def brute_force_matches(gts, aset, grids, threshold, input_size):
    """Oracle: exhaustive scan of (level, anchor, gt) triples."""
    out = set()
    for gi, gt in enumerate(gts):
        for lv, anchors in aset.per_level.items():
            if lv not in grids:
                continue
            for ai, (aw, ah) in enumerate(anchors):
                gw, gh = gt.w * input_size, gt.h * input_size
                r = max(gw / aw, aw / gw, gh / ah, ah / gh)
                if r < threshold:
                    out.add((gi, lv, ai))
    return out


def test_assignment_matches_brute_force(rng):
    aset = default_anchors(["P2", "P3", "P4", "P5"])
    for trial in range(50):
        n = int(rng.integers(1, 21))
        gts = [BBox(cx=float(rng.uniform(0.05, 0.95)),
                    cy=float(rng.uniform(0.05, 0.95)),
                    w=float(rng.uniform(0.004, 0.6)),
                    h=float(rng.uniform(0.004, 0.6)),
                    class_id=int(rng.integers(0, 4))) for _ in range(n)]
        asn, unmatched = assign_targets(gts, aset, GRIDS_640_P2)
        got = {(gts.index(a.box), a.level, a.anchor_index) for a in asn}
        want = brute_force_matches(gts, aset, GRIDS_640_P2, 4.0, 640)
        assert got == want
        matched_gis = {g for g, _, _ in want}
        assert {gts.index(g) for g in unmatched} == \
            set(range(n)) - matched_gis
