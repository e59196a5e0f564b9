"""Run configuration: one YAML file with model / train / aug / data / eval
sections, every field defaulted, unknown keys rejected (catches typos).
The aug section uses the augmentation table's key names verbatim."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import yaml

from .anchors import AnchorSet, default_anchors
from .augment import AugProfile
from .data import PROTOCOL_PRESETS, SplitProtocol, SyntheticSceneConfig
from .graph import LEVELS, ConfigError, ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = 0.001      # dense PR curves
    detect_conf: float = 0.25          # human-readable detect output
    nms_iou: float = 0.45
    iou_threshold: float = 0.5         # TP/FP matching

    def validate(self):
        if not 0 < self.nms_iou < 1:
            raise ConfigError("nms_iou must be in (0,1)")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError("iou_threshold must be in (0,1]")


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""                        # existing dataset, or
    synth: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    protocol: str = "ds1_t1"
    split_by: str = "sequence"
    split_seed: int = 0

    def resolve_protocol(self) -> SplitProtocol:
        if self.protocol in PROTOCOL_PRESETS:
            return PROTOCOL_PRESETS[self.protocol]()
        raise ConfigError(f"unknown protocol {self.protocol!r}; choose from "
                          f"{sorted(PROTOCOL_PRESETS)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(num_classes=2))
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugProfile = field(default_factory=AugProfile)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    anchors: dict = field(default_factory=dict)   # level -> [[w, h], ...]

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.aug.validate()
        self.eval.validate()
        for lv in self.anchors:
            if lv not in LEVELS:
                raise ConfigError(f"anchors: unknown level {lv!r}")

    def anchor_set(self) -> AnchorSet:
        levels = self.model.sorted_levels()
        if not self.anchors:
            return default_anchors(levels)
        stock = default_anchors(levels).per_level
        per_level = {lv: tuple(tuple(float(v) for v in pair)
                               for pair in self.anchors[lv])
                     if lv in self.anchors else stock[lv]
                     for lv in levels}
        return AnchorSet(per_level=per_level)

    def to_dict(self) -> dict:
        doc = {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "aug": asdict(self.aug),
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }
        if self.anchors:
            doc["anchors"] = {lv: [list(p) for p in pairs]
                              for lv, pairs in self.anchors.items()}
        return _plain(doc)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True,
                              default_flow_style=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build_section(cls, raw, section):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    return raw


def load_run_config(path) -> RunConfig:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    return run_config_from_dict(doc)


def run_config_from_dict(doc: dict) -> RunConfig:
    known_sections = {"model", "train", "aug", "data", "eval", "anchors"}
    unknown = set(doc) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = RunConfig()
    if "model" in doc:
        raw = _build_section(ModelConfig, doc["model"], "model")
        if "head_levels" in raw:
            raw = {**raw, "head_levels": tuple(raw["head_levels"])}
        cfg.model = ModelConfig(**raw)
    if "train" in doc:
        cfg.train = TrainConfig(**_build_section(TrainConfig, doc["train"],
                                                 "train"))
    if "aug" in doc:
        cfg.aug = AugProfile.from_dict(doc["aug"])
    if "data" in doc:
        raw = _build_section(DataConfig, doc["data"], "data")
        if "synth" in raw:
            sraw = _build_section(SyntheticSceneConfig, raw["synth"],
                                  "data.synth")
            for key in ("class_names", "class_shapes", "ranges",
                        "times_of_day", "targets_per_image"):
                if key in sraw:
                    sraw = {**sraw, key: tuple(sraw[key])}
            raw = {**raw, "synth": SyntheticSceneConfig(**sraw)}
        cfg.data = DataConfig(**raw)
    if "eval" in doc:
        cfg.eval = EvalConfig(**_build_section(EvalConfig, doc["eval"],
                                               "eval"))
    if "anchors" in doc:
        cfg.anchors = dict(doc["anchors"])
    cfg.validate()
    return cfg
