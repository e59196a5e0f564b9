"""Manifests, annotations, partition protocols, synthetic generation."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from tirdet.data import (DatasetManifest, ManifestEntry, ParseError,
                         ProtocolError, SplitProtocol, SyntheticSceneConfig,
                         ds1_t1, ds1_t2, ds2_t2, generate_synthetic,
                         ingest_external, load_annotation, load_manifest,
                         partition, save_manifest, write_annotation)


def test_annotation_round_trip(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("0 0.500000 0.500000 0.100000 0.100000\n"
                 "2 0.250000 0.750000 0.030000 0.040000\n")
    boxes = load_annotation(f)
    assert boxes.shape == (2, 5)
    assert boxes[0].tolist() == [0, 0.5, 0.5, 0.1, 0.1]
    g = tmp_path / "b.txt"
    write_annotation(g, boxes)
    assert g.read_bytes() == f.read_bytes()


def test_empty_annotation_is_valid(tmp_path):
    f = tmp_path / "empty.txt"
    f.write_text("")
    assert load_annotation(f).shape == (0, 5)


def test_annotation_errors_carry_line_numbers(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("0 0.5 0.5 0.1 0.1\n0 1.5 0.5 0.1 0.1\n")
    with pytest.raises(ParseError, match=":2:"):
        load_annotation(f)
    f.write_text("0 0.5 0.5 0.1\n")
    with pytest.raises(ParseError, match="expected 5 fields"):
        load_annotation(f)
    f.write_text("0 0.5 0.5 0.1 abc\n")
    with pytest.raises(ParseError, match=":1:"):
        load_annotation(f)
    f.write_text("0 0.5 0.5 0.0 0.1\n")
    with pytest.raises(ParseError, match="size"):
        load_annotation(f)


def _fake_manifest(n_seq=10, frames=3, ranges=(1.0, 2.0), tods=("day",)):
    entries = []
    rng = np.random.default_rng(0)
    for s in range(n_seq):
        r = float(ranges[s % len(ranges)])
        tod = tods[s % len(tods)]
        for f in range(frames):
            entries.append(ManifestEntry(
                image=f"images/s{s:03d}_f{f}.png",
                annotation=f"labels/s{s:03d}_f{f}.txt",
                range_km=r, time_of_day=tod, sequence=f"s{s:03d}"))
    return DatasetManifest(root=Path("/nonexistent"), entries=entries)


def test_protocol_validation():
    ds1_t1().validate()
    ds1_t2().validate()
    ds2_t2().validate()
    with pytest.raises(ProtocolError, match="overlap"):
        SplitProtocol("T2_decorrelated", (1.0, 2.0), (2.0,)).validate()
    with pytest.raises(ProtocolError, match="beyond"):
        SplitProtocol("T2_decorrelated", (2.0, 3.0), (1.0,)).validate()
    with pytest.raises(ProtocolError, match="fractions"):
        SplitProtocol("T1_correlated", (1.0,), (1.0,),
                      fractions=(0.5, 0.2, 0.2)).validate()
    with pytest.raises(ProtocolError, match="subset"):
        SplitProtocol("T1_correlated", (1.0,), (2.0,)).validate()


def test_partition_fractions_100_sequences():
    man = _fake_manifest(n_seq=100, frames=2, ranges=(1.0, 1.5, 2.0, 2.5))
    part = partition(man, ds1_t1(), seed=3)
    seqs = lambda entries: {e.sequence for e in entries}
    assert len(seqs(part.train)) == 70
    assert len(seqs(part.val)) == 20
    assert len(seqs(part.test)) == 10
    assert len(part.train) == 140 and len(part.val) == 40 \
        and len(part.test) == 20


def test_partition_disjoint_by_sequence():
    man = _fake_manifest(n_seq=30, frames=4, ranges=(1.0, 1.5, 2.0, 2.5))
    part = partition(man, ds1_t1(), seed=11)
    a = {e.sequence for e in part.train}
    b = {e.sequence for e in part.val}
    c = {e.sequence for e in part.test}
    assert not (a & b) and not (a & c) and not (b & c)


def test_partition_t2_only_test_ranges():
    man = _fake_manifest(n_seq=40, frames=2,
                         ranges=(1.0, 1.5, 2.0, 2.5, 3.0))
    part = partition(man, ds1_t2(), seed=0)
    assert {e.range_km for e in part.test} == {3.0}
    assert all(e.range_km <= 2.5 for e in part.train + part.val)
    train_seqs = {e.sequence for e in part.train} | \
        {e.sequence for e in part.val}
    assert not train_seqs & {e.sequence for e in part.test}


def test_partition_deterministic():
    man = _fake_manifest(n_seq=25, frames=2, ranges=(1.0, 1.5, 2.0, 2.5))
    p1 = partition(man, ds1_t1(), seed=9)
    p2 = partition(man, ds1_t1(), seed=9)
    assert [e.image for e in p1.train] == [e.image for e in p2.train]
    assert [e.image for e in p1.test] == [e.image for e in p2.test]
    p3 = partition(man, ds1_t1(), seed=10)
    assert [e.image for e in p1.train] != [e.image for e in p3.train]


def test_partition_coverage_gap_names_ranges():
    man = _fake_manifest(n_seq=10, frames=1, ranges=(1.0, 1.5))
    with pytest.raises(ProtocolError, match="3.0"):
        partition(man, ds1_t2(), seed=0)


def test_partition_frame_granularity():
    man = _fake_manifest(n_seq=10, frames=10, ranges=(1.0, 1.5, 2.0, 2.5))
    part = partition(man, ds1_t1(), seed=1, by="frame")
    assert len(part.train) == 70 and len(part.val) == 20 \
        and len(part.test) == 10


def _tree_checksum(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generator_deterministic(tmp_path):
    cfg = SyntheticSceneConfig(image_size=64, base_target_px=24,
                               ranges=(1.0, 2.0))
    generate_synthetic(cfg, 10, seed=7, out_dir=tmp_path / "a")
    generate_synthetic(cfg, 10, seed=7, out_dir=tmp_path / "b")
    assert _tree_checksum(tmp_path / "a") == _tree_checksum(tmp_path / "b")
    generate_synthetic(cfg, 10, seed=8, out_dir=tmp_path / "c")
    assert _tree_checksum(tmp_path / "a") != _tree_checksum(tmp_path / "c")


def test_generator_manifest_loads_back(tmp_path):
    cfg = SyntheticSceneConfig(image_size=64, base_target_px=24,
                               ranges=(1.0, 2.0))
    man = generate_synthetic(cfg, 8, seed=1, out_dir=tmp_path)
    loaded = load_manifest(tmp_path / "manifest.json")
    assert len(loaded) == 8
    assert loaded.class_names == list(cfg.class_names)
    sample = loaded.load_sample(loaded.entries[0])
    assert sample.image.shape == (64, 64)
    assert sample.image.dtype == np.float32
    assert len(sample.boxes) >= 1


def test_generator_boxes_tight_at_saturated_contrast(tmp_path):
    cfg = SyntheticSceneConfig(image_size=96, base_target_px=30,
                               ranges=(1.0, 1.5), contrast=5.0,
                               contrast_falloff=0.0, clutter=0.0,
                               background_day=0.0, background_night=0.0,
                               targets_per_image=(1, 1))
    man = generate_synthetic(cfg, 12, seed=3, out_dir=tmp_path)
    for entry in man.entries:
        sample = man.load_sample(entry)
        labeled, n = ndimage.label(sample.image > 0.5)
        assert n >= 1
        comp_boxes = []
        for comp in range(1, n + 1):
            ys, xs = np.nonzero(labeled == comp)
            comp_boxes.append((xs.min(), ys.min(), xs.max() + 1,
                               ys.max() + 1))
        for row in sample.boxes:
            bx1 = row[1] * 96 - row[3] * 96 / 2
            by1 = row[2] * 96 - row[4] * 96 / 2
            bx2, by2 = bx1 + row[3] * 96, by1 + row[4] * 96
            best = 0.0
            for tx1, ty1, tx2, ty2 in comp_boxes:
                iw = max(0, min(bx2, tx2) - max(bx1, tx1))
                ih = max(0, min(by2, ty2) - max(by1, ty1))
                inter = iw * ih
                union = (bx2 - bx1) * (by2 - by1) \
                    + (tx2 - tx1) * (ty2 - ty1) - inter
                best = max(best, inter / union)
            assert best >= 0.95


def test_generator_scale_law(tmp_path):
    cfg = SyntheticSceneConfig(image_size=128, base_target_px=40,
                               ranges=(1.0,), targets_per_image=(2, 3),
                               frames_per_sequence=2)
    near = generate_synthetic(cfg, 30, seed=5, out_dir=tmp_path / "near")
    far_cfg = SyntheticSceneConfig(image_size=128, base_target_px=40,
                                   ranges=(5.0,), targets_per_image=(2, 3),
                                   frames_per_sequence=2)
    far = generate_synthetic(far_cfg, 30, seed=5, out_dir=tmp_path / "far")

    def mean_area(man):
        areas = []
        for e in man.entries:
            boxes = load_annotation(man.annotation_path(e))
            areas += (boxes[:, 3] * boxes[:, 4]).tolist()
        return float(np.mean(areas))

    ratio = mean_area(far) / mean_area(near)
    assert abs(ratio - 1 / 25) / (1 / 25) < 0.20


def test_generator_scale_law_floor():
    with pytest.raises(ValueError, match="2px"):
        SyntheticSceneConfig(image_size=64, base_target_px=10,
                             ranges=(1.0, 5.0)).validate()


def test_manifest_validation_errors(tmp_path):
    with pytest.raises(ParseError, match="does not exist"):
        load_manifest(tmp_path / "nope.json")
    p = tmp_path / "manifest.json"
    p.write_text("{not json")
    with pytest.raises(ParseError, match="JSON"):
        load_manifest(p)
    p.write_text(json.dumps({"format_version": 99, "entries": []}))
    with pytest.raises(ParseError, match="format_version"):
        load_manifest(p)
    doc = {"format_version": 1, "entries": [
        {"image": "x.png", "annotation": "x.txt", "range_km": 1.0,
         "time_of_day": "day", "sequence": "s"}]}
    p.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match="missing file"):
        load_manifest(p)


def test_manifest_save_load_round_trip(tmp_path):
    cfg = SyntheticSceneConfig(image_size=64, base_target_px=24,
                               ranges=(1.0,))
    man = generate_synthetic(cfg, 4, seed=2, out_dir=tmp_path)
    path = save_manifest(man, tmp_path / "again.json")
    again = load_manifest(path)
    assert [e.image for e in again.entries] == [e.image for e in man.entries]
    assert again.ranges() == man.ranges()


def test_ingest_stub_documents_contract():
    with pytest.raises(NotImplementedError, match="manifest"):
        ingest_external("/somewhere")
