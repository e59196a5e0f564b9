"""Training loop: SGD with warmup+cosine schedule, two learning regimes
(scratch, transfer with a frozen-backbone phase), per-epoch validation
through the evaluation module, and bit-reproducible checkpointing.

Reproducibility model: every random stream is derived statelessly from
(seed, epoch, item), so resuming from a checkpoint at epoch k replays the
exact trajectory of an uninterrupted run in single-threaded mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .anchors import BBox, assign_targets, default_anchors
from .augment import AugProfile, apply_profile
from .evaluate import evaluate_detections, gts_from_normalized
from .graph import ModelGraph, build_graph, ConfigError
from .losses import LossWeights, gradient_gate, total_loss_tensor
from .postprocess import decode_predictions, nms
from .runner import GraphRunner, apply_head_priors, init_scratch

CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    """Aborted run (non-finite loss, failed gate, bad inputs)."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "scratch"            # "scratch" | "transfer"
    epochs: int = 100                # transfer default: 30 frozen + 10 free
    freeze_epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    final_lr_fraction: float = 0.01
    seed: int = 0
    ema: bool = False
    ema_decay: float = 0.999
    obj_focal: bool = False
    ratio_threshold: float = 4.0
    loss_box: float = 0.05
    loss_obj: float = 1.0
    loss_cls: float = 0.5
    weights_path: str = ""           # transfer source checkpoint
    run_gradient_gate: bool = True
    val_conf_threshold: float = 0.001
    val_nms_iou: float = 0.45

    def validate(self):
        if self.mode not in ("scratch", "transfer"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.mode == "transfer" and not self.weights_path:
            raise ConfigError("transfer mode needs weights_path")

    def loss_weights(self):
        return LossWeights(box=self.loss_box, obj=self.loss_obj,
                           cls=self.loss_cls)


def transfer_defaults(**kw) -> TrainConfig:
    kw.setdefault("mode", "transfer")
    kw.setdefault("epochs", 40)
    kw.setdefault("freeze_epochs", 30)
    return TrainConfig(**kw)


def lr_at(epoch, step, config: TrainConfig, steps_per_epoch):
    """Learning rate at a (epoch, step) position.

    Linear warmup from lr0/10 to lr0 over the first warmup_epochs, then
    cosine decay to lr0 * final_lr_fraction at the end of the run.
    """
    t = epoch + (step / steps_per_epoch if steps_per_epoch else 0.0)
    w = min(config.warmup_epochs, config.epochs)
    if t < w:
        return config.lr0 * (0.1 + 0.9 * t / w)
    span = max(config.epochs - w, 1e-12)
    u = min((t - w) / span, 1.0)
    lo = config.final_lr_fraction
    return config.lr0 * (lo + (1.0 - lo) * math.cos(math.pi * u / 2.0) ** 2)


# ---------------------------------------------------------------------------
# parameter initialization and checkpoints


def init_params(graph: ModelGraph, mode, seed, weights_path=None,
                head_priors=True):
    """Build and initialize a runner.

    scratch: fan-in scaled random conv weights, zero biases (except the
    detection-prior head biases, see apply_head_priors), unit fusion
    weights. transfer: load a source checkpoint and remap every tensor
    whose name and shape match; the rest are freshly initialized. Returns
    (runner, report) where report counts mapped/unmapped tensors.
    """
    runner = init_scratch(GraphRunner(graph), seed)
    if head_priors:
        apply_head_priors(runner)
    if mode == "scratch":
        return runner, {"mapped": 0, "fresh": sum(1 for _ in
                                                  runner.state_dict())}
    if not weights_path or not Path(weights_path).exists():
        raise TrainError(f"transfer weights not found: {weights_path!r}")
    payload = torch.load(weights_path, map_location="cpu",
                         weights_only=True)
    source = payload.get("model_state", payload)
    own = runner.state_dict()
    mapped = {}
    for name, tensor in source.items():
        if name in own and own[name].shape == tensor.shape:
            mapped[name] = tensor
    own.update(mapped)
    runner.load_state_dict(own)
    report = {"mapped": len(mapped), "fresh": len(own) - len(mapped)}
    if not mapped:
        raise TrainError(f"no tensors in {weights_path} match the graph")
    return runner, report


def save_checkpoint(path, runner, optimizer, epoch, best_map,
                    train_config=None):
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "graph_hash": runner.graph.config_hash(),
        "graph_json": runner.graph.to_json(),
        "epoch": epoch,
        "best_map": best_map,
        "model_state": runner.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "train_config": asdict(train_config) if train_config else None,
    }
    torch.save(payload, path)
    return Path(path)


def load_checkpoint(path, graph: ModelGraph = None, remap=False):
    """Load a checkpoint; refuse a mismatched graph unless remap is set."""
    path = Path(path)
    if not path.exists():
        raise TrainError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise TrainError(f"unsupported checkpoint version in {path}")
    if graph is not None and not remap:
        if payload["graph_hash"] != graph.config_hash():
            raise TrainError(
                f"checkpoint graph hash {payload['graph_hash'][:12]} does "
                f"not match target graph {graph.config_hash()[:12]}; pass "
                "remap=True to load matching-shape tensors only")
    return payload


def runner_from_checkpoint(path, graph: ModelGraph = None,
                           remap=False) -> GraphRunner:
    payload = load_checkpoint(path, graph, remap)
    if graph is None:
        cfg_doc = json.loads(payload["graph_json"])["config"]
        from .graph import ModelConfig
        cfg_doc["head_levels"] = tuple(cfg_doc["head_levels"])
        graph = build_graph(ModelConfig(**cfg_doc))
    runner = GraphRunner(graph)
    if remap:
        own = runner.state_dict()
        for name, tensor in payload["model_state"].items():
            if name in own and own[name].shape == tensor.shape:
                own[name] = tensor
        runner.load_state_dict(own)
    else:
        runner.load_state_dict(payload["model_state"])
    runner.eval()
    return runner


class WeightEma:
    """Exponential moving average of model weights (off by default)."""

    def __init__(self, runner, decay):
        self.decay = decay
        self.shadow = {k: v.detach().clone()
                       for k, v in runner.state_dict().items()}

    def update(self, runner):
        with torch.no_grad():
            for k, v in runner.state_dict().items():
                if v.dtype.is_floating_point:
                    self.shadow[k].mul_(self.decay).add_(
                        v.detach(), alpha=1.0 - self.decay)
                else:
                    self.shadow[k] = v.detach().clone()

    def copy_to(self, runner):
        runner.load_state_dict(self.shadow)


# ---------------------------------------------------------------------------
# the loop


def _rng_for(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=tuple(int(k) for k in key)))


def _boxes_to_gts(boxes, num_classes):
    gts = []
    for row in np.asarray(boxes):
        gts.append(BBox(cx=float(row[1]), cy=float(row[2]),
                        w=float(row[3]), h=float(row[4]),
                        class_id=int(row[0])))
        gts[-1].validate(num_classes)
    return gts


def _set_backbone_frozen(runner, frozen):
    for name, mod in runner.mods.items():
        if name.startswith("backbone_"):
            for p in mod.parameters():
                p.requires_grad_(not frozen)
            if frozen:
                mod.eval()    # batch-norm statistics hold still too


def _validate(runner, val_samples, anchors, config, chunk=8):
    per_dets, per_gts = [], []
    size = runner.graph.config.input_size
    for lo in range(0, len(val_samples), chunk):
        batch = val_samples[lo:lo + chunk]
        preds = runner.predict(np.stack([s.image for s in batch]))
        for j, sample in enumerate(batch):
            grids = {lv: p[j] for lv, p in preds.items()}
            dets = nms(decode_predictions(grids, anchors,
                                          config.val_conf_threshold,
                                          max_dets=300),
                       config.val_nms_iou)
            per_dets.append(dets)
            per_gts.append(gts_from_normalized(sample.boxes, size))
    nc = runner.graph.config.num_classes
    return evaluate_detections(per_dets, per_gts, num_classes=nc,
                               iou_thr=0.5)


def train(graph: ModelGraph, manifest, partition, config: TrainConfig,
          profile: AugProfile = None, anchors=None, out_dir=None,
          resume=None, stop_after_epoch=None):
    """Run the configured regime; returns (best_path, last_path, runlog).

    runlog is a list of per-epoch records (losses, lr, validation
    precision/recall/mAP, step losses). Checkpoints land in out_dir when
    given; otherwise only the log and in-memory runner are produced.
    stop_after_epoch pauses the run early without changing the schedule
    horizon; resuming from the written checkpoint replays the exact
    uninterrupted trajectory.
    """
    config.validate()
    profile = profile if profile is not None else AugProfile()
    levels = graph.config.sorted_levels()
    anchors = anchors or default_anchors(levels)
    size = graph.config.input_size
    grids = {lv: (size // graph.strides[lv],) * 2 for lv in levels}

    if config.run_gradient_gate:
        gate = gradient_gate(seed=config.seed)
        if gate.max_rel_error >= 1e-3:
            raise TrainError(f"gradient gate failed: {gate}")

    train_pool = [manifest.load_sample(e) for e in partition.train]
    val_samples = [manifest.load_sample(e) for e in partition.val]
    if not train_pool or not val_samples:
        raise ConfigError("empty train or val partition")
    for s in train_pool + val_samples:
        if s.image.shape != (size, size):
            raise ConfigError(f"sample size {s.image.shape} != model "
                              f"input {size}")

    if resume:
        payload = load_checkpoint(resume, graph)
        runner = GraphRunner(graph)
        runner.load_state_dict(payload["model_state"])
        start_epoch = payload["epoch"] + 1
        best_map = payload["best_map"]
    else:
        runner, _ = init_params(graph, config.mode, config.seed,
                                config.weights_path or None)
        start_epoch = 0
        best_map = -1.0

    decay, no_decay = [], []
    for name, p in runner.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    optimizer = torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=config.lr0, momentum=config.momentum, nesterov=True)
    if resume and payload.get("optimizer_state"):
        optimizer.load_state_dict(payload["optimizer_state"])

    ema = WeightEma(runner, config.ema_decay) if config.ema else None
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    log_path = out / "runlog.jsonl" if out else None

    n_train = len(train_pool)
    steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))
    weights = config.loss_weights()
    runlog = []

    end_epoch = config.epochs if stop_after_epoch is None \
        else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, end_epoch):
        runner.train()
        frozen = config.mode == "transfer" and epoch < config.freeze_epochs
        _set_backbone_frozen(runner, frozen)
        order = _rng_for(config.seed, epoch).permutation(n_train)
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
        step_losses = []
        unmatched_count = 0
        lr = config.lr0
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size:
                        (step + 1) * config.batch_size]
            images, assignments = [], []
            for j, i in enumerate(idx):
                item_rng = _rng_for(config.seed, epoch, int(i))
                sample = apply_profile(train_pool, profile, item_rng,
                                       base_index=int(i))
                gts = _boxes_to_gts(sample.boxes, graph.config.num_classes)
                asn, unmatched = assign_targets(
                    gts, anchors, grids, config.ratio_threshold)
                unmatched_count += len(unmatched)
                images.append(sample.image)
                assignments.append(asn)
            x = torch.from_numpy(np.stack(images)[:, None])
            if graph.config.image_channels == 3:
                x = x.repeat(1, 3, 1, 1)
            preds = runner.forward(x)
            loss, bd = total_loss_tensor(preds, assignments, anchors,
                                         weights, gamma=profile.fl_gamma,
                                         obj_focal=config.obj_focal)
            if not math.isfinite(bd.total):
                if out and last_path and last_path.exists():
                    diag = f"last good checkpoint at {last_path}"
                else:
                    diag = "no checkpoint written yet"
                raise TrainError(f"non-finite loss {bd.total} at epoch "
                                 f"{epoch} step {step}; {diag}")
            lr = lr_at(epoch, step, config, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            # optimization objective scales with batch size (the reported
            # loss stays the per-image weighted sum)
            (loss * x.shape[0]).backward()
            optimizer.step()
            if ema:
                ema.update(runner)
            step_losses.append(bd.total)
            for k in sums:
                sums[k] += getattr(bd, k)

        eval_runner = runner
        if ema:
            eval_runner = GraphRunner(graph)
            ema.copy_to(eval_runner)
        report = _validate(eval_runner, val_samples, anchors, config)
        record = {
            "epoch": epoch,
            "loss_box": sums["box"] / steps_per_epoch,
            "loss_obj": sums["obj"] / steps_per_epoch,
            "loss_cls": sums["cls"] / steps_per_epoch,
            "loss_total": sums["total"] / steps_per_epoch,
            "lr": lr,
            "val_precision": float(np.mean(
                [m.precision for m in report.per_class.values()])),
            "val_recall": float(np.mean(
                [m.recall for m in report.per_class.values()])),
            "val_map50": report.map50,
            "unmatched_gts": unmatched_count,
            "step_losses": step_losses,
        }
        runlog.append(record)
        if log_path:
            with open(log_path, "a", encoding="ascii") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out:
            save_checkpoint(last_path, runner, optimizer, epoch,
                            max(best_map, report.map50), config)
            if report.map50 > best_map:
                save_checkpoint(best_path, runner, optimizer, epoch,
                                report.map50, config)
        if report.map50 > best_map:
            best_map = report.map50

    return {"runner": runner, "best_map": best_map, "runlog": runlog,
            "best_path": best_path, "last_path": last_path}
