"""Dataset manifests, range-partitioning protocols, synthetic scene generator.

A dataset is a JSON manifest indexing grayscale PNG frames with plain-text
annotations ("class cx cy w h" per line, normalized). Frames carry a
sensor-to-target range tag (km), a day/night tag and a sequence id; video
data splits by sequence so near-duplicate frames never straddle split
boundaries.

Two evaluation protocols partition by range:
  T1 (correlated):   test frames drawn from the training ranges
  T2 (decorrelated): test frames strictly beyond the training ranges

The synthetic generator stands in for range-tagged MWIR vehicle footage at
desk scale: hot shape archetypes on correlated-noise clutter, apparent size
proportional to 1/range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .augment import Sample, empty_boxes

MANIFEST_VERSION = 1
ANNOTATION_DECIMALS = 6


class ParseError(ValueError):
    """Malformed manifest or annotation content, with file/line context."""


class ProtocolError(ValueError):
    """Split protocol inconsistent with itself or with the manifest."""


@dataclass(frozen=True)
class ManifestEntry:
    image: str                    # path relative to the manifest directory
    annotation: str
    range_km: float
    time_of_day: str
    sequence: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def ranges(self):
        return sorted({e.range_km for e in self.entries})

    def sequences(self):
        return sorted({e.sequence for e in self.entries})

    def image_path(self, entry) -> Path:
        return self.root / entry.image

    def annotation_path(self, entry) -> Path:
        return self.root / entry.annotation

    def load_sample(self, entry) -> Sample:
        image = load_image(self.image_path(entry))
        boxes = load_annotation(self.annotation_path(entry))
        return Sample(image=image, boxes=boxes, range_km=entry.range_km,
                      time_of_day=entry.time_of_day)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=np.float32) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr


def save_image(path, image):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(
        path, format="PNG")


def load_annotation(path) -> np.ndarray:
    """Parse "class cx cy w h" lines into an (n, 5) array.

    Empty files are valid (no objects). Any malformed line raises a
    ParseError naming the line number.
    """
    path = Path(path)
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(f"{path}:{ln}: expected 5 fields, "
                                 f"got {len(parts)}")
            try:
                cls = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: {exc}") from None
            if cls < 0:
                raise ParseError(f"{path}:{ln}: negative class id {cls}")
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                raise ParseError(f"{path}:{ln}: center ({cx}, {cy}) "
                                 "out of [0,1]")
            if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
                raise ParseError(f"{path}:{ln}: size ({w}, {h}) out of (0,1]")
            rows.append([cls, cx, cy, w, h])
    return np.array(rows, dtype=np.float64) if rows else empty_boxes()


def write_annotation(path, boxes):
    lines = []
    for row in np.asarray(boxes):
        vals = " ".join(f"{v:.{ANNOTATION_DECIMALS}f}" for v in row[1:])
        lines.append(f"{int(row[0])} {vals}\n")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(lines)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"manifest {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ParseError(f"{path}: unsupported format_version "
                         f"{doc.get('format_version')!r}")
    root = path.parent
    entries = []
    for i, raw in enumerate(doc.get("entries", [])):
        try:
            entry = ManifestEntry(image=raw["image"],
                                  annotation=raw["annotation"],
                                  range_km=float(raw["range_km"]),
                                  time_of_day=raw["time_of_day"],
                                  sequence=str(raw["sequence"]))
        except KeyError as exc:
            raise ParseError(f"{path}: entry {i}: missing field {exc}") \
                from None
        if entry.range_km <= 0:
            raise ParseError(f"{path}: entry {i}: range_km must be positive")
        if entry.time_of_day not in ("day", "night"):
            raise ParseError(f"{path}: entry {i}: time_of_day "
                             f"{entry.time_of_day!r} not day/night")
        for rel in (entry.image, entry.annotation):
            if not (root / rel).exists():
                raise ParseError(f"{path}: entry {i}: missing file {rel}")
        entries.append(entry)
    return DatasetManifest(root=root, entries=entries,
                           class_names=list(doc.get("class_names", [])))


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / "manifest.json"
    doc = {
        "format_version": MANIFEST_VERSION,
        "class_names": list(manifest.class_names),
        "entries": [asdict(e) for e in manifest.entries],
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def ingest_external(video_dir):
    """Converter stub for real sensor archives.

    Holders of range-tagged MWIR video (e.g. the public NVESD vehicle set,
    ARF frames with ATG ground truth) should export each video to 8/16-bit
    grayscale PNG frames plus one "class cx cy w h" text file per frame,
    then write a manifest.json as produced by save_manifest: one entry per
    frame with range_km, time_of_day and the source video id as sequence.
    Binary archive decoding is out of scope here.
    """
    raise NotImplementedError(ingest_external.__doc__)


# ---------------------------------------------------------------------------
# split protocols


@dataclass(frozen=True)
class SplitProtocol:
    name: str                       # "T1_correlated" | "T2_decorrelated"
    train_ranges: tuple
    test_ranges: tuple
    fractions: tuple = (0.70, 0.20, 0.10)

    def validate(self):
        if self.name not in ("T1_correlated", "T2_decorrelated"):
            raise ProtocolError(f"unknown protocol name {self.name!r}")
        if not self.train_ranges or not self.test_ranges:
            raise ProtocolError("train_ranges and test_ranges must be "
                                "non-empty")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or len(self.fractions) != 3:
            raise ProtocolError("fractions must be 3 values summing to 1")
        if self.name == "T2_decorrelated":
            overlap = set(self.train_ranges) & set(self.test_ranges)
            if overlap:
                raise ProtocolError(f"decorrelated protocol has overlapping "
                                    f"ranges {sorted(overlap)}")
            if min(self.test_ranges) <= max(self.train_ranges):
                raise ProtocolError("decorrelated test ranges must lie "
                                    "strictly beyond the training ranges")
        else:
            if set(self.test_ranges) - set(self.train_ranges):
                raise ProtocolError("correlated test ranges must be a "
                                    "subset of the training ranges")


DS1_TRAIN = (1.0, 1.5, 2.0, 2.5)
DS2_TRAIN = (3.0, 3.5, 4.0, 4.5)


def ds1_t1() -> SplitProtocol:
    return SplitProtocol("T1_correlated", DS1_TRAIN, DS1_TRAIN)


def ds1_t2() -> SplitProtocol:
    return SplitProtocol("T2_decorrelated", DS1_TRAIN, (3.0,))


def ds2_t1() -> SplitProtocol:
    return SplitProtocol("T1_correlated", DS2_TRAIN, DS2_TRAIN)


def ds2_t2() -> SplitProtocol:
    return SplitProtocol("T2_decorrelated", DS2_TRAIN, (5.0,))


PROTOCOL_PRESETS = {"ds1_t1": ds1_t1, "ds1_t2": ds1_t2,
                    "ds2_t1": ds2_t1, "ds2_t2": ds2_t2}


@dataclass
class Partition:
    protocol: SplitProtocol
    train: list
    val: list
    test: list

    def summary(self):
        return {"protocol": self.protocol.name,
                "train": len(self.train), "val": len(self.val),
                "test": len(self.test)}


def _range_in(r, ranges, tol=1e-6):
    return any(abs(r - t) <= tol for t in ranges)


def partition(manifest: DatasetManifest, protocol: SplitProtocol, seed,
              by="sequence") -> Partition:
    """Split the manifest per protocol, deterministically in the seed.

    Within the training ranges, sequences (or frames, if by="frame") are
    shuffled and split by the protocol fractions. The correlated protocol
    tests on the held-out fraction; the decorrelated protocol tests on all
    entries at the test ranges, untouched by training.
    """
    protocol.validate()
    if by not in ("sequence", "frame"):
        raise ProtocolError(f"unknown split granularity {by!r}")
    have = manifest.ranges()
    missing = sorted({r for r in (*protocol.train_ranges,
                                  *protocol.test_ranges)
                      if not _range_in(r, have)})
    if missing:
        raise ProtocolError(f"manifest lacks entries at ranges {missing}")

    in_train_ranges = [e for e in manifest.entries
                       if _range_in(e.range_km, protocol.train_ranges)]
    if by == "sequence":
        keys = sorted({e.sequence for e in in_train_ranges})
    else:
        keys = sorted(e.image for e in in_train_ranges)
    rng = np.random.default_rng(seed)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    n = len(keys)
    n_train = round(protocol.fractions[0] * n)
    n_val = round(protocol.fractions[1] * n)
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    groups = {"train": set(keys[:n_train]),
              "val": set(keys[n_train:n_train + n_val]),
              "test": set(keys[n_train + n_val:])}

    def key_of(e):
        return e.sequence if by == "sequence" else e.image

    train = [e for e in in_train_ranges if key_of(e) in groups["train"]]
    val = [e for e in in_train_ranges if key_of(e) in groups["val"]]
    if protocol.name == "T1_correlated":
        test = [e for e in in_train_ranges if key_of(e) in groups["test"]]
    else:
        test = [e for e in manifest.entries
                if _range_in(e.range_km, protocol.test_ranges)]
    return Partition(protocol=protocol, train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# synthetic thermal scenes


# archetype -> (aspect w:h, minimum side as a fraction of apparent size)
ARCHETYPES = {
    "slab": 0.62,    # solid rectangle, vehicle-hull-like
    "ring": 1.00,    # hot annulus with a cold core
    "dome": 0.90,    # filled disk
    "beam": 0.34,    # long thin bar
}
DEFAULT_CLASS_NAMES = ("T72", "BTR70", "SUV", "Pickup")
DEFAULT_CLASS_SHAPES = ("slab", "ring", "dome", "beam")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    image_size: int = 128
    class_names: tuple = DEFAULT_CLASS_NAMES[:2]
    class_shapes: tuple = DEFAULT_CLASS_SHAPES[:2]
    ranges: tuple = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
    times_of_day: tuple = ("day", "night")
    targets_per_image: tuple = (1, 3)       # inclusive bounds
    base_target_px: float = 36.0            # apparent size at 1 km
    contrast: float = 0.55                  # target-over-background at 1 km
    contrast_falloff: float = 0.3           # contrast ~ range^-falloff
    clutter: float = 0.06                   # correlated clutter amplitude
    background_day: float = 0.40
    background_night: float = 0.18
    frames_per_sequence: int = 4

    def validate(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if len(self.class_names) != len(self.class_shapes) \
                or not self.class_names:
            raise ValueError("class_names and class_shapes must be "
                             "non-empty and aligned")
        for shape in self.class_shapes:
            if shape not in ARCHETYPES:
                raise ValueError(f"unknown archetype {shape!r}")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if min(self.ranges) <= 0:
            raise ValueError("ranges must be positive")
        worst = min(ARCHETYPES[s] for s in self.class_shapes)
        min_side = self.base_target_px / max(self.ranges) * worst
        if min_side < 2.0:
            raise ValueError(
                f"scale law leaves min target side {min_side:.2f}px < 2px "
                f"at range {max(self.ranges)}; raise base_target_px")

    def apparent_px(self, range_km) -> float:
        return self.base_target_px / range_km

    def background(self, time_of_day) -> float:
        return self.background_day if time_of_day == "day" \
            else self.background_night


def _shape_mask(shape, size_px, rng):
    """Boolean mask for one target at the given apparent size."""
    s = max(size_px, 2.0)
    aspect = ARCHETYPES[shape]
    w = max(int(round(s)), 2)
    h = max(int(round(s * aspect)), 2)
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "slab":
        mask = np.ones((h, w), dtype=bool)
    elif shape == "beam":
        mask = np.ones((h, w), dtype=bool)
    elif shape == "dome":
        cy, cx = (h - 1) / 2, (w - 1) / 2
        mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    elif shape == "ring":
        cy, cx = (h - 1) / 2, (w - 1) / 2
        r2 = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2
        mask = (r2 <= 1.0) & (r2 >= 0.45 ** 2)
    else:
        raise ValueError(shape)
    return mask


def _render_scene(config, layout, tod, range_km, rng):
    """Render one frame: background + clutter + hot targets; returns
    (image, boxes) with boxes tight to target extent."""
    size = config.image_size
    bg = config.background(tod)
    coarse = gaussian_filter(rng.normal(size=(size, size)),
                             sigma=size / 16.0)
    coarse /= max(np.abs(coarse).max(), 1e-9)
    image = bg + config.clutter * coarse \
        + 0.25 * config.clutter * rng.normal(size=(size, size))
    contrast = config.contrast / (range_km ** config.contrast_falloff)
    boxes = []
    for cls_id, shape, (ty, tx), jitter in layout:
        mask = _shape_mask(shape, config.apparent_px(range_km), rng)
        mh, mw = mask.shape
        y0 = int(round(ty * (size - mh)))
        x0 = int(round(tx * (size - mw)))
        hot = bg + contrast * (1.0 + 0.15 * jitter)
        region = image[y0:y0 + mh, x0:x0 + mw]
        region[mask] = hot
        ys, xs = np.nonzero(mask)
        bx1, bx2 = x0 + xs.min(), x0 + xs.max() + 1
        by1, by2 = y0 + ys.min(), y0 + ys.max() + 1
        boxes.append([cls_id, (bx1 + bx2) / 2 / size, (by1 + by2) / 2 / size,
                      (bx2 - bx1) / size, (by2 - by1) / size])
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, np.array(boxes) if boxes else empty_boxes()


def _sample_layout(config, rng):
    """Target list for one sequence: class, shape, position, brightness
    jitter. Positions avoid heavy overlap."""
    lo, hi = config.targets_per_image
    count = int(rng.integers(lo, hi + 1))
    layout = []
    taken = []
    for _ in range(count):
        cls_id = int(rng.integers(0, len(config.class_names)))
        for _ in range(20):
            ty, tx = rng.uniform(0.08, 0.92, size=2)
            if all(abs(ty - oy) + abs(tx - ox) > 0.25 for oy, ox in taken):
                taken.append((ty, tx))
                layout.append((cls_id, config.class_shapes[cls_id],
                               (ty, tx), float(rng.normal())))
                break
    return layout


def generate_synthetic(config: SyntheticSceneConfig, n_images, seed,
                       out_dir) -> DatasetManifest:
    """Write a seeded synthetic dataset (images/, labels/, manifest.json).

    Frames come in sequences sharing a scene layout with small positional
    drift, mimicking video. Fully deterministic per (config, n, seed).
    """
    config.validate()
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    made = 0
    seq_idx = 0
    while made < n_images:
        seq_idx += 1
        seq = f"seq{seq_idx:04d}"
        range_km = float(rng.choice(config.ranges))
        tod = str(rng.choice(config.times_of_day))
        layout = _sample_layout(config, rng)
        frames = min(config.frames_per_sequence, n_images - made)
        for f in range(frames):
            drifted = []
            for cls_id, shape, (ty, tx), jit in layout:
                dy, dx = rng.uniform(-0.02, 0.02, size=2)
                drifted.append((cls_id, shape,
                                (min(max(ty + dy, 0.0), 1.0),
                                 min(max(tx + dx, 0.0), 1.0)), jit))
            image, boxes = _render_scene(config, drifted, tod, range_km, rng)
            stem = f"{seq}_f{f:02d}"
            save_image(out / "images" / f"{stem}.png", image)
            write_annotation(out / "labels" / f"{stem}.txt", boxes)
            entries.append(ManifestEntry(
                image=f"images/{stem}.png", annotation=f"labels/{stem}.txt",
                range_km=range_km, time_of_day=tod, sequence=seq))
            made += 1
    manifest = DatasetManifest(root=out, entries=entries,
                               class_names=list(config.class_names))
    save_manifest(manifest)
    return manifest
