"""Anchor priors, box decoding, and ground-truth-to-anchor assignment.

Anchors are prior (width, height) pairs in input pixels, three per pyramid
level. Predictions are decoded relative to (cell, anchor, stride):

    center = (2 * sigmoid(t) - 0.5 + cell) * stride
    size   = (2 * sigmoid(t))^2 * anchor

so a zero logit sits at the cell center with the anchor's size, and sizes
are bounded by 4x the anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import LEVELS, STRIDES, ConfigError

# stock priors for the stride 8/16/32 heads; the stride-4 head reuses the
# P3 priors at half scale since its targets are a further octave smaller
STOCK_ANCHORS = {
    "P3": ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
    "P4": ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
    "P5": ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
}


@dataclass(frozen=True)
class BBox:
    """Normalized ground-truth box: center/size as fractions of image size."""
    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def validate(self, num_classes=None):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) out of [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) out of (0,1]")
        if self.cx + self.w / 2 <= 0 or self.cx - self.w / 2 >= 1 \
                or self.cy + self.h / 2 <= 0 or self.cy - self.h / 2 >= 1:
            raise ValueError("box does not intersect the image")
        if self.class_id < 0 or (num_classes is not None
                                 and self.class_id >= num_classes):
            raise ValueError(f"class_id {self.class_id} out of range")


@dataclass(frozen=True)
class AnchorSet:
    per_level: dict   # level -> tuple of (w, h) in input pixels

    def __post_init__(self):
        for lv, anchors in self.per_level.items():
            if lv not in LEVELS:
                raise ConfigError(f"unknown level {lv!r}")
            if any(w <= 0 or h <= 0 for w, h in anchors):
                raise ConfigError(f"{lv}: anchor sides must be positive")
            areas = [w * h for w, h in anchors]
            if areas != sorted(areas):
                raise ConfigError(f"{lv}: anchors must be sorted by area")

    def levels(self):
        return sorted(self.per_level, key=LEVELS.index)


def default_anchors(levels) -> AnchorSet:
    """Stock anchors for P3/P4/P5; P2 gets the P3 anchors halved."""
    if not levels:
        raise ConfigError("empty level set")
    per_level = {}
    for lv in levels:
        if lv in STOCK_ANCHORS:
            per_level[lv] = STOCK_ANCHORS[lv]
        elif lv == "P2":
            per_level[lv] = tuple((w / 2.0, h / 2.0)
                                  for w, h in STOCK_ANCHORS["P3"])
        else:
            raise ConfigError(f"unknown level {lv!r}")
    return AnchorSet(per_level=per_level)


def decode_box(raw, cell, anchor, stride):
    """Decode 4 raw logits (tx, ty, tw, th) at grid cell (row, col) into a
    pixel-space (cx, cy, w, h) box."""
    tx, ty, tw, th = (float(v) for v in raw)
    row, col = cell
    aw, ah = anchor
    sx = 1.0 / (1.0 + math.exp(-tx))
    sy = 1.0 / (1.0 + math.exp(-ty))
    sw = 1.0 / (1.0 + math.exp(-tw))
    sh = 1.0 / (1.0 + math.exp(-th))
    cx = (2.0 * sx - 0.5 + col) * stride
    cy = (2.0 * sy - 0.5 + row) * stride
    w = (2.0 * sw) ** 2 * aw
    h = (2.0 * sh) ** 2 * ah
    return cx, cy, w, h


@dataclass(frozen=True)
class TargetAssignment:
    level: str
    cell: tuple          # (row, col)
    anchor_index: int
    box: BBox
    offsets: tuple       # (tx, ty) = grid-unit center minus cell, in (-0.5, 1.5)
    size_px: tuple       # target (w, h) in input pixels


def shape_ratio(gt_wh, anchor_wh):
    gw, gh = gt_wh
    aw, ah = anchor_wh
    return max(gw / aw, aw / gw, gh / ah, ah / gh)


def assign_targets(gts, anchors: AnchorSet, grids, ratio_threshold=4.0):
    """Match ground truths to (level, cell, anchor) slots.

    A gt matches an anchor iff the worst side ratio is < ratio_threshold.
    Each match lands in its home cell plus up to two adjacent cells picked
    by the center-fraction rule (fraction < 0.5 toward the lower neighbor,
    > 0.5 toward the upper; exactly 0.5 adds no neighbor). Returns
    (assignments, unmatched_gts).
    """
    if ratio_threshold <= 1.0:
        raise ConfigError("ratio_threshold must be > 1")
    sizes = {}
    input_size = None
    for lv in anchors.levels():
        if lv not in grids:
            continue
        ny, nx = grids[lv]
        size = ny * STRIDES[lv]
        if nx * STRIDES[lv] != size or (input_size or size) != size:
            raise ConfigError(f"grid sizes inconsistent at {lv}")
        input_size = size
        sizes[lv] = (ny, nx)
    if input_size is None:
        raise ConfigError("no usable levels in grids")

    assignments = []
    unmatched = []
    for gt in gts:
        gt.validate()
        gw, gh = gt.w * input_size, gt.h * input_size
        hit = False
        for lv, (ny, nx) in sizes.items():
            stride = STRIDES[lv]
            gx, gy = gt.cx * input_size / stride, gt.cy * input_size / stride
            for ai, anchor in enumerate(anchors.per_level[lv]):
                if shape_ratio((gw, gh), anchor) >= ratio_threshold:
                    continue
                hit = True
                col, row = int(math.floor(gx)), int(math.floor(gy))
                col, row = min(col, nx - 1), min(row, ny - 1)
                cells = [(row, col)]
                fx, fy = gx - col, gy - row
                if fx < 0.5 and col - 1 >= 0:
                    cells.append((row, col - 1))
                elif fx > 0.5 and col + 1 < nx:
                    cells.append((row, col + 1))
                if fy < 0.5 and row - 1 >= 0:
                    cells.append((row - 1, col))
                elif fy > 0.5 and row + 1 < ny:
                    cells.append((row + 1, col))
                for r, c in cells:
                    assignments.append(TargetAssignment(
                        level=lv, cell=(r, c), anchor_index=ai, box=gt,
                        offsets=(gx - c, gy - r), size_px=(gw, gh)))
        if not hit:
            unmatched.append(gt)
    return assignments, unmatched
