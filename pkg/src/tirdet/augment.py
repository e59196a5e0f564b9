"""Training-time augmentation: photometric jitter, geometric warps, flips,
mosaic, mixup, copy-paste. All operations are box-consistent and draw every
random number from the caller-supplied generator, so identical
(pool, profile, seed) triples reproduce bitwise.

Images are single-channel float32 grids in [0, 1]. Boxes ride along as an
(n, 5) array of (class, cx, cy, w, h) with normalized coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict

import cv2
import numpy as np

from .graph import ShapeError

# a warped box survives if it keeps >= 10% of its area after clipping and
# both sides stay at least this many pixels
MIN_BOX_SIDE_PX = 2.0
MIN_AREA_KEPT = 0.10
PASTE_MAX_IOU = 0.3
PASTE_ATTEMPTS = 10


@dataclass(frozen=True)
class AugProfile:
    """Hyperparameter bundle for the training augmentation pipeline.

    Field names are the run-config keys. fl_gamma rides along here because
    the profile is one bundle in the config file, but it parameterizes the
    classification loss, not an image op. mosaic/mixup/copy_paste are
    application probabilities (mosaic is read as a probability, matching
    the mixup and copy_paste semantics).
    """
    fl_gamma: float = 0.3
    hsv_h: float = 0.015
    hsv_s: float = 0.7
    hsv_v: float = 0.4
    degrees: float = 3.0
    translate: float = 0.1
    scale: float = 0.3
    shear: float = 0.0
    perspective: float = 0.0005
    flipud: float = 0.1
    fliplr: float = 0.5
    mosaic: float = 0.1
    mixup: float = 0.4
    copy_paste: float = 0.5

    def validate(self):
        for name in ("flipud", "fliplr", "mosaic", "mixup", "copy_paste"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        for name in ("fl_gamma", "hsv_h", "hsv_s", "hsv_v", "degrees",
                     "translate", "scale", "shear", "perspective"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.perspective > 0.001:
            raise ValueError("perspective must be <= 0.001")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        prof = cls(**d)
        prof.validate()
        return prof


def no_aug_profile() -> AugProfile:
    """All probabilities and magnitudes zero: raw passthrough."""
    return AugProfile(fl_gamma=0.0, hsv_h=0.0, hsv_s=0.0, hsv_v=0.0,
                      degrees=0.0, translate=0.0, scale=0.0, shear=0.0,
                      perspective=0.0, flipud=0.0, fliplr=0.0, mosaic=0.0,
                      mixup=0.0, copy_paste=0.0)


@dataclass
class Sample:
    image: np.ndarray                 # (h, w) float32 in [0, 1]
    boxes: np.ndarray                 # (n, 5): class, cx, cy, w, h
    range_km: float = 1.0
    time_of_day: str = "day"

    def copy(self):
        return Sample(self.image.copy(), self.boxes.copy(),
                      self.range_km, self.time_of_day)

    @property
    def size(self):
        return self.image.shape[:2]


def empty_boxes() -> np.ndarray:
    return np.zeros((0, 5), dtype=np.float64)


def worker_rng(seed, worker_id) -> np.random.Generator:
    """Independent per-worker stream; stream id is the worker index."""
    return np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(worker_id,)))


def _boxes_to_px(boxes, h, w):
    out = boxes.copy().astype(np.float64)
    out[:, 1] *= w
    out[:, 2] *= h
    out[:, 3] *= w
    out[:, 4] *= h
    return out


def _boxes_to_norm(boxes_px, h, w):
    out = boxes_px.copy()
    out[:, 1] /= w
    out[:, 2] /= h
    out[:, 3] /= w
    out[:, 4] /= h
    return out


def _corners_to_cxywh(x1, y1, x2, y2):
    return (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1


def hsv_jitter(sample: Sample, gains, rng) -> Sample:
    """Photometric jitter. Thermal frames carry no chroma, so the hue and
    saturation gains are inert; the value gain applies a multiplicative
    brightness in [1-v, 1+v], clamped to [0, 1]. Boxes unchanged."""
    h_gain, s_gain, v_gain = gains
    draws = rng.uniform(-1.0, 1.0, size=3)   # h, s, v slots
    factor = np.float32(1.0 + draws[2] * v_gain)
    image = np.clip(sample.image * factor, 0.0, 1.0).astype(np.float32)
    return Sample(image, sample.boxes.copy(), sample.range_km,
                  sample.time_of_day)


def _affine_matrix(h, w, degrees, translate, scale, shear, perspective, rng):
    center = np.eye(3)
    center[0, 2] = -w / 2.0
    center[1, 2] = -h / 2.0

    persp = np.eye(3)
    persp[2, 0] = rng.uniform(-perspective, perspective)
    persp[2, 1] = rng.uniform(-perspective, perspective)

    angle = rng.uniform(-degrees, degrees)
    gain = rng.uniform(1.0 - scale, 1.0 + scale)
    rot = np.eye(3)
    rot[:2] = cv2.getRotationMatrix2D(angle=angle, center=(0.0, 0.0),
                                      scale=gain)

    sh = np.eye(3)
    sh[0, 1] = math.tan(math.radians(rng.uniform(-shear, shear)))
    sh[1, 0] = math.tan(math.radians(rng.uniform(-shear, shear)))

    trans = np.eye(3)
    trans[0, 2] = w / 2.0 + rng.uniform(-translate, translate) * w
    trans[1, 2] = h / 2.0 + rng.uniform(-translate, translate) * h

    return trans @ sh @ rot @ persp @ center


def _map_boxes(boxes, matrix, h, w):
    """Corner-transform boxes, take axis-aligned hulls, clip, apply the
    survival rule. boxes are normalized; returns surviving normalized rows."""
    if len(boxes) == 0:
        return boxes.copy()
    px = _boxes_to_px(boxes, h, w)
    x1 = px[:, 1] - px[:, 3] / 2
    y1 = px[:, 2] - px[:, 4] / 2
    x2 = px[:, 1] + px[:, 3] / 2
    y2 = px[:, 2] + px[:, 4] / 2
    corners = np.stack([
        np.stack([x1, y1], 1), np.stack([x2, y1], 1),
        np.stack([x2, y2], 1), np.stack([x1, y2], 1)], axis=1)  # (n, 4, 2)
    ones = np.ones((*corners.shape[:2], 1))
    pts = np.concatenate([corners, ones], axis=2) @ matrix.T
    pts = pts[..., :2] / pts[..., 2:3]
    hx1, hy1 = pts[..., 0].min(1), pts[..., 1].min(1)
    hx2, hy2 = pts[..., 0].max(1), pts[..., 1].max(1)
    pre_area = (hx2 - hx1) * (hy2 - hy1)
    cx1, cy1 = np.clip(hx1, 0, w), np.clip(hy1, 0, h)
    cx2, cy2 = np.clip(hx2, 0, w), np.clip(hy2, 0, h)
    cw, ch = cx2 - cx1, cy2 - cy1
    keep = (cw >= MIN_BOX_SIDE_PX) & (ch >= MIN_BOX_SIDE_PX) \
        & (cw * ch >= MIN_AREA_KEPT * np.maximum(pre_area, 1e-9))
    out = np.zeros((int(keep.sum()), 5))
    out[:, 0] = boxes[keep, 0]
    ccx, ccy, ccw, cchh = _corners_to_cxywh(cx1[keep], cy1[keep],
                                            cx2[keep], cy2[keep])
    out[:, 1], out[:, 2], out[:, 3], out[:, 4] = ccx, ccy, ccw, cchh
    return _boxes_to_norm(out, h, w)


def random_affine(sample: Sample, degrees, translate, scale, shear,
                  perspective, rng) -> Sample:
    """One composite homography within the profile bounds; image warped,
    boxes corner-mapped with the clip/survival rule."""
    h, w = sample.size
    m = _affine_matrix(h, w, degrees, translate, scale, shear,
                       perspective, rng)
    if np.array_equal(m, np.eye(3)):
        return sample.copy()
    if perspective > 0:
        image = cv2.warpPerspective(sample.image, m, (w, h),
                                    flags=cv2.INTER_LINEAR, borderValue=0.0)
    else:
        image = cv2.warpAffine(sample.image, m[:2], (w, h),
                               flags=cv2.INTER_LINEAR, borderValue=0.0)
    boxes = _map_boxes(sample.boxes, m, h, w)
    return Sample(image.astype(np.float32), boxes, sample.range_km,
                  sample.time_of_day)


def flip(sample: Sample, p_ud, p_lr, rng) -> Sample:
    """Mirror flips: vertical sends cy to 1-cy, horizontal sends cx to 1-cx."""
    image = sample.image
    boxes = sample.boxes.copy()
    if rng.random() < p_ud:
        image = np.flipud(image)
        if len(boxes):
            boxes[:, 2] = 1.0 - boxes[:, 2]
    if rng.random() < p_lr:
        image = np.fliplr(image)
        if len(boxes):
            boxes[:, 1] = 1.0 - boxes[:, 1]
    return Sample(np.ascontiguousarray(image), boxes, sample.range_km,
                  sample.time_of_day)


def mosaic4(samples, out_size, rng) -> Sample:
    """2x2 collage around a random center on a double-size canvas, scaled
    back down to out_size."""
    if len(samples) != 4:
        raise ShapeError(f"mosaic needs 4 samples, got {len(samples)}")
    s = int(out_size)
    canvas = np.zeros((2 * s, 2 * s), dtype=np.float32)
    xc, yc = (int(round(v)) for v in rng.uniform(0.5 * s, 1.5 * s, size=2))
    rows = []
    for i, sample in enumerate(samples):
        img = sample.image
        if img.shape != (s, s):
            img = cv2.resize(img, (s, s), interpolation=cv2.INTER_LINEAR)
        if i == 0:    # top-left
            x1a, y1a, x2a, y2a = max(xc - s, 0), max(yc - s, 0), xc, yc
            x1b, y1b = s - (x2a - x1a), s - (y2a - y1a)
            x2b, y2b = s, s
        elif i == 1:  # top-right
            x1a, y1a, x2a, y2a = xc, max(yc - s, 0), min(xc + s, 2 * s), yc
            x1b, y1b = 0, s - (y2a - y1a)
            x2b, y2b = x2a - x1a, s
        elif i == 2:  # bottom-left
            x1a, y1a, x2a, y2a = max(xc - s, 0), yc, xc, min(yc + s, 2 * s)
            x1b, y1b = s - (x2a - x1a), 0
            x2b, y2b = s, y2a - y1a
        else:         # bottom-right
            x1a, y1a, x2a, y2a = xc, yc, min(xc + s, 2 * s), min(yc + s, 2 * s)
            x1b, y1b = 0, 0
            x2b, y2b = x2a - x1a, y2a - y1a
        canvas[y1a:y2a, x1a:x2a] = img[y1b:y2b, x1b:x2b]
        if len(sample.boxes):
            px = _boxes_to_px(sample.boxes, s, s)
            px[:, 1] += x1a - x1b
            px[:, 2] += y1a - y1b
            rows.append(px)
    boxes_canvas = np.concatenate(rows, 0) if rows else empty_boxes()
    # scale the double canvas down; clip boxes with the survival rule
    image = cv2.resize(canvas, (s, s), interpolation=cv2.INTER_LINEAR)
    if len(boxes_canvas):
        boxes_canvas[:, 1:] *= 0.5
        norm = _boxes_to_norm(boxes_canvas, s, s)
        boxes = _map_boxes(norm, np.eye(3), s, s)
    else:
        boxes = empty_boxes()
    first = samples[0]
    return Sample(image.astype(np.float32), boxes, first.range_km,
                  first.time_of_day)


def mixup(a: Sample, b: Sample, rng) -> Sample:
    """Blend two samples with lambda ~ Beta(32, 32); boxes concatenate."""
    if a.size != b.size:
        raise ShapeError(f"mixup size mismatch {a.size} vs {b.size}")
    lam = rng.beta(32.0, 32.0)
    image = (lam * a.image + (1.0 - lam) * b.image).astype(np.float32)
    boxes = np.concatenate([a.boxes, b.boxes], 0) if len(a.boxes) or \
        len(b.boxes) else empty_boxes()
    return Sample(image, boxes, a.range_km, a.time_of_day)


def _iou_px(box, others):
    if len(others) == 0:
        return np.zeros(0)
    x1 = np.maximum(box[0], others[:, 0])
    y1 = np.maximum(box[1], others[:, 1])
    x2 = np.minimum(box[2], others[:, 2])
    y2 = np.minimum(box[3], others[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def copy_paste(dst: Sample, src: Sample, p, rng) -> Sample:
    """Paste source-box pixel rectangles into dst at sampled locations.

    Each src box is pasted with probability p at a uniform location whose
    overlap with the existing dst boxes stays below the IoU bound; after
    PASTE_ATTEMPTS rejected placements the box is skipped.
    """
    if dst.size != src.size:
        raise ShapeError(f"copy_paste size mismatch {dst.size} vs {src.size}")
    h, w = dst.size
    out = dst.copy()
    for row in src.boxes:
        if rng.random() >= p:
            continue
        px = _boxes_to_px(row[None], h, w)[0]
        bw = int(round(px[3]))
        bh = int(round(px[4]))
        if bw < 1 or bh < 1 or bw > w or bh > h:
            continue
        sx1 = int(round(px[1] - px[3] / 2))
        sy1 = int(round(px[2] - px[4] / 2))
        sx1 = min(max(sx1, 0), w - bw)
        sy1 = min(max(sy1, 0), h - bh)
        existing = _boxes_to_px(out.boxes, h, w) if len(out.boxes) else \
            np.zeros((0, 5))
        exist_xyxy = np.stack([existing[:, 1] - existing[:, 3] / 2,
                               existing[:, 2] - existing[:, 4] / 2,
                               existing[:, 1] + existing[:, 3] / 2,
                               existing[:, 2] + existing[:, 4] / 2], 1) \
            if len(existing) else np.zeros((0, 4))
        for _ in range(PASTE_ATTEMPTS):
            dx1 = int(rng.integers(0, w - bw + 1))
            dy1 = int(rng.integers(0, h - bh + 1))
            cand = np.array([dx1, dy1, dx1 + bw, dy1 + bh], dtype=np.float64)
            if len(exist_xyxy) and _iou_px(cand, exist_xyxy).max() > PASTE_MAX_IOU:
                continue
            out.image[dy1:dy1 + bh, dx1:dx1 + bw] = \
                src.image[sy1:sy1 + bh, sx1:sx1 + bw]
            new = np.array([[row[0], (dx1 + bw / 2) / w, (dy1 + bh / 2) / h,
                             bw / w, bh / h]])
            out.boxes = np.concatenate([out.boxes, new], 0) \
                if len(out.boxes) else new
            break
    return out


@dataclass
class AugTrace:
    """What the pipeline actually did; used for reporting and rate checks."""
    used_mosaic: bool = False
    used_mixup: bool = False
    paste_coins: int = 0
    paste_hits: int = 0


def _pipeline_once(pool, profile, rng, trace, base_index=None):
    n = len(pool)
    if rng.random() < profile.mosaic:
        idx = rng.integers(0, n, size=4)
        if base_index is not None:
            idx[0] = base_index
        out_size = pool[int(idx[0])].image.shape[0]
        sample = mosaic4([pool[int(i)] for i in idx], out_size, rng)
        trace.used_mosaic = True
    else:
        i = rng.integers(0, n) if base_index is None else base_index
        sample = pool[int(i)].copy()
    src = pool[int(rng.integers(0, n))]
    before = len(sample.boxes)
    sample = copy_paste(sample, src, profile.copy_paste, rng)
    trace.paste_coins += len(src.boxes)
    trace.paste_hits += len(sample.boxes) - before
    sample = random_affine(sample, profile.degrees, profile.translate,
                           profile.scale, profile.shear,
                           profile.perspective, rng)
    sample = hsv_jitter(sample, (profile.hsv_h, profile.hsv_s,
                                 profile.hsv_v), rng)
    sample = flip(sample, profile.flipud, profile.fliplr, rng)
    return sample


def apply_profile(pool, profile: AugProfile, rng, with_trace=False,
                  base_index=None):
    """Full training pipeline on one draw from the pool.

    Order: (mosaic | single sample) -> copy_paste -> affine -> photometric
    -> flips -> optional mixup with a second pipeline output. Every random
    draw comes from rng. base_index pins the primary sample (epoch sweeps);
    companions (mosaic tiles, paste/mixup sources) stay random.
    """
    if len(pool) == 0:
        raise ValueError("empty sample pool")
    profile.validate()
    trace = AugTrace()
    sample = _pipeline_once(pool, profile, rng, trace, base_index)
    if rng.random() < profile.mixup:
        other = _pipeline_once(pool, profile, rng, AugTrace())
        sample = mixup(sample, other, rng)
        trace.used_mixup = True
    return (sample, trace) if with_trace else sample
