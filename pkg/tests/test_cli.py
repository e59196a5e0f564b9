"""CLI surface: subcommands, exit codes, artifact round trips."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from tirdet.cli import main
from tirdet.config import load_run_config, run_config_from_dict
from tirdet.data import load_manifest
from tirdet.graph import ConfigError

NC4_BASELINE = {"model": {"num_classes": 4}}
NC4_MODIFIED = {"model": {"num_classes": 4, "neck_kind": "bifpn",
                          "head_levels": ["P2", "P3", "P4", "P5"]}}


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


SMALL_RUN = {
    "model": {"num_classes": 2, "input_size": 64, "width_multiple": 0.25,
              "neck_kind": "bifpn",
              "head_levels": ["P2", "P3", "P4", "P5"]},
    "train": {"epochs": 2, "batch_size": 4, "seed": 0},
    "data": {"protocol": "ds1_t1",
             "synth": {"image_size": 64, "base_target_px": 26,
                       "ranges": [1.0, 1.5, 2.0, 2.5, 3.0],
                       "frames_per_sequence": 2}},
}


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "files.json":
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One small CLI training run shared by the eval/detect tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "run.yaml", SMALL_RUN)
    data_dir = root / "data"
    assert main(["synth", "--config", config, "--out", str(data_dir),
                 "--n", "40", "--seed", "0"]) == 0
    run_dir = root / "run"
    assert main(["train", "--config", config, "--out", str(run_dir),
                 "--data", str(data_dir / "manifest.json")]) == 0
    return config, data_dir, run_dir


def test_synth_deterministic(tmp_path):
    config = write_config(tmp_path / "c.yaml", SMALL_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", config, "--out", str(a), "--n", "12",
                 "--seed", "7"]) == 0
    assert main(["synth", "--config", config, "--out", str(b), "--n", "12",
                 "--seed", "7"]) == 0
    assert tree_hash(a) == tree_hash(b)
    man = load_manifest(a / "manifest.json")
    assert len(man) == 12


def test_synth_rejects_empty(tmp_path, capsys):
    config = write_config(tmp_path / "c.yaml", SMALL_RUN)
    rc = main(["synth", "--config", config, "--out", str(tmp_path / "x"),
               "--n", "0"])
    assert rc == 2
    assert "empty dataset" in capsys.readouterr().err


def test_inspect_reference_counts(tmp_path, capsys):
    config = write_config(tmp_path / "b.yaml", NC4_BASELINE)
    assert main(["inspect", "--config", config]) == 0
    out = capsys.readouterr().out
    params = int(out.split("parameters: ")[1].split("\n")[0].replace(",", ""))
    assert abs(params - 7_020_913) / 7_020_913 < 0.02

    config = write_config(tmp_path / "m.yaml", NC4_MODIFIED)
    assert main(["inspect", "--config", config, "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert abs(doc["parameters"] - 7_086_449) / 7_086_449 < 0.02
    assert abs(doc["gflops"] - 16.4) / 16.4 < 0.10
    assert doc["head_levels"] == ["P2", "P3", "P4", "P5"]


def test_inspect_rejects_bad_config(tmp_path, capsys):
    config = write_config(tmp_path / "bad.yaml",
                          {"model": {"num_classes": 2, "input_size": 100}})
    assert main(["inspect", "--config", config]) == 2
    assert "divisible" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_run_config(write_config(tmp_path / "t.yaml",
                                     {"model": {"num_clases": 4}}))
    with pytest.raises(ConfigError, match="sections"):
        run_config_from_dict({"models": {}})


def test_train_artifacts_exist(trained_run):
    _, _, run_dir = trained_run
    assert (run_dir / "best.ckpt").exists()
    assert (run_dir / "last.ckpt").exists()
    lines = (run_dir / "runlog.jsonl").read_text().strip().split("\n")
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert rec["epoch"] == 0 and "val_map50" in rec
    assert (run_dir / "training_curves.svg").exists()
    index = json.loads((run_dir / "files.json").read_text())
    assert any("best.ckpt" in f for f in index["files"])


def test_train_transfer_needs_weights(tmp_path, capsys):
    config = write_config(tmp_path / "c.yaml", SMALL_RUN)
    rc = main(["train", "--config", config, "--out", str(tmp_path / "r"),
               "--mode", "transfer"])
    assert rc == 2
    assert "weights" in capsys.readouterr().err


def test_train_seed_reproducible(trained_run, tmp_path):
    config, data_dir, run_dir = trained_run
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", config, "--out", str(rerun),
                 "--data", str(data_dir / "manifest.json")]) == 0
    a = (run_dir / "runlog.jsonl").read_text().split("\n")[0]
    b = (rerun / "runlog.jsonl").read_text().split("\n")[0]
    assert a == b


def test_effective_config_round_trip(trained_run):
    config, _, run_dir = trained_run
    emitted = load_run_config(run_dir / "effective_config.yaml")
    original = load_run_config(config)
    assert emitted.model == original.model
    assert emitted.train == original.train
    assert emitted.aug == original.aug
    assert emitted.data == original.data


def test_eval_writes_reports(trained_run, tmp_path, capsys):
    config, data_dir, run_dir = trained_run
    out = tmp_path / "eval"
    rc = main(["eval", "--config", config, "--out", str(out),
               "--checkpoint", str(run_dir / "best.ckpt"),
               "--data", str(data_dir / "manifest.json"),
               "--protocol", "both"])
    assert rc == 0
    assert (out / "report_ds1_t1.json").exists()
    assert (out / "report_ds1_t2.json").exists()
    assert (out / "protocol_comparison.svg").exists()
    doc = json.loads((out / "report_ds1_t1.json").read_text())
    assert "map50" in doc
    svg = (out / "report_ds1_t1_pr.svg").read_text()
    assert svg.startswith("<svg") and "Precision-Recall" in svg


def test_eval_graph_mismatch_is_runtime_error(trained_run, tmp_path, capsys):
    config, data_dir, run_dir = trained_run
    other = dict(SMALL_RUN)
    other["model"] = {"num_classes": 2, "input_size": 64,
                      "width_multiple": 0.25}     # baseline neck instead
    badcfg = write_config(tmp_path / "other.yaml", other)
    rc = main(["eval", "--config", badcfg, "--out", str(tmp_path / "e"),
               "--checkpoint", str(run_dir / "best.ckpt"),
               "--data", str(data_dir / "manifest.json")])
    assert rc == 3
    assert "hash" in capsys.readouterr().err


def test_detect_on_synth_image(trained_run, tmp_path):
    config, data_dir, run_dir = trained_run
    man = load_manifest(data_dir / "manifest.json")
    image = str(man.image_path(man.entries[0]))
    out = tmp_path / "det"
    rc = main(["detect", "--config", config, "--out", str(out),
               "--checkpoint", str(run_dir / "best.ckpt"),
               "--conf", "0.9", image])
    assert rc == 0
    assert (out / "detections.jsonl").exists()
    stem = Path(image).stem
    assert (out / f"{stem}_annotated.png").exists()


def test_detect_missing_checkpoint(tmp_path, capsys):
    rc = main(["detect", "--out", str(tmp_path / "d"),
               "--checkpoint", str(tmp_path / "nope.ckpt"), "img.png"])
    assert rc == 2
    assert "checkpoint" in capsys.readouterr().err


def test_usage_errors_exit_2():
    assert main(["train"]) == 2          # missing --out
    assert main(["nonexistent-command"]) == 2
