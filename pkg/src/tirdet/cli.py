"""Command-line entry point: synth / train / eval / detect / inspect.

Exit codes are stable for scripting: 0 success, 2 usage or configuration
error, 3 runtime failure. Every command honors --seed and writes its
artifacts plus a files.json index under the chosen output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .data import (ParseError, ProtocolError, generate_synthetic,
                   load_manifest, partition)
from .evaluate import evaluate_detections, gts_from_normalized
from .graph import ConfigError, build_graph, count_flops, count_parameters
from .plots import (comparison_bars_svg, confusion_svg, pr_curves_svg,
                    training_curves_svg)
from .postprocess import decode_predictions, nms, write_detections_jsonl
from .train import TrainError, runner_from_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(ValueError):
    pass


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.data = dataclasses.replace(cfg.data, split_seed=args.seed)
    for name, target in (("epochs", "epochs"), ("batch", "batch_size"),
                         ("mode", "mode"), ("weights", "weights_path")):
        v = getattr(args, name, None)
        if v is not None:
            cfg.train = dataclasses.replace(cfg.train, **{target: v})
    img = getattr(args, "img", None)
    if img is not None:
        cfg.model = dataclasses.replace(cfg.model, input_size=img)
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}")
    return out


def _write_files_index(out: Path, produced):
    index = out / "files.json"
    produced = sorted(str(Path(p).relative_to(out)) for p in produced)
    index.write_text(json.dumps({"files": produced}, indent=2) + "\n")


def _emit_effective_config(cfg: RunConfig, out: Path):
    path = out / "effective_config.yaml"
    path.write_text(cfg.to_yaml())
    return path


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.n is not None and args.n <= 0:
        raise UsageError("empty dataset requested (--n must be >= 1)")
    out = _out_dir(args)
    n = args.n if args.n is not None else 200
    seed = args.seed if args.seed is not None else cfg.data.split_seed
    manifest = generate_synthetic(cfg.data.synth, n, seed, out)
    produced = [manifest.root / "manifest.json",
                _emit_effective_config(cfg, out)]
    produced += [manifest.image_path(e) for e in manifest.entries]
    produced += [manifest.annotation_path(e) for e in manifest.entries]
    _write_files_index(out, produced)
    counts = {}
    for e in manifest.entries:
        counts[e.range_km] = counts.get(e.range_km, 0) + 1
    print(f"wrote {len(manifest.entries)} images in "
          f"{len(manifest.sequences())} sequences to {out}")
    for r in sorted(counts):
        print(f"  range {r} km: {counts[r]} images")
    return EXIT_OK


def _resolve_dataset(cfg: RunConfig, args):
    manifest_path = getattr(args, "data", None) or cfg.data.manifest
    if not manifest_path:
        raise UsageError("no dataset: pass --data or set data.manifest")
    return load_manifest(manifest_path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.train.mode == "transfer" and not cfg.train.weights_path:
        raise UsageError("--mode transfer requires --weights")
    manifest = _resolve_dataset(cfg, args)
    proto = cfg.data.resolve_protocol()
    parts = partition(manifest, proto, cfg.data.split_seed,
                      by=cfg.data.split_by)
    graph = build_graph(cfg.model)
    out = _out_dir(args)
    result = train(graph, manifest, parts, cfg.train, cfg.aug,
                   anchors=cfg.anchor_set(), out_dir=out)
    produced = [result["best_path"], result["last_path"],
                out / "runlog.jsonl", _emit_effective_config(cfg, out)]
    curves = out / "training_curves.svg"
    curves.write_text(training_curves_svg(result["runlog"]))
    produced.append(curves)
    _write_files_index(out, produced)
    print(f"trained {cfg.train.epochs} epochs; best val mAP@0.5 = "
          f"{result['best_map']:.4f}")
    print(f"checkpoints: {result['best_path']} / {result['last_path']}")
    return EXIT_OK


def _predict_detections(runner, sample, aset, conf, nms_iou):
    preds = runner.predict(sample.image[None])
    grids = {lv: p[0] for lv, p in preds.items()}
    return nms(decode_predictions(grids, aset, conf), nms_iou)


def _eval_protocol(runner, manifest, proto, cfg: RunConfig):
    parts = partition(manifest, proto, cfg.data.split_seed,
                      by=cfg.data.split_by)
    if not parts.test:
        raise UsageError(f"no test entries for protocol {proto.name}")
    size = runner.graph.config.input_size
    per_dets, per_gts = [], []
    for entry in parts.test:
        sample = manifest.load_sample(entry)
        per_dets.append(_predict_detections(
            runner, sample, cfg.anchor_set(),
            cfg.eval.conf_threshold, cfg.eval.nms_iou))
        per_gts.append(gts_from_normalized(sample.boxes, size))
    return evaluate_detections(
        per_dets, per_gts, num_classes=runner.graph.config.num_classes,
        iou_thr=cfg.eval.iou_threshold, conf_thr=cfg.eval.detect_conf,
        class_names=manifest.class_names)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = _resolve_dataset(cfg, args)
    graph = build_graph(cfg.model)
    runner = runner_from_checkpoint(args.checkpoint, graph)
    out = _out_dir(args)
    if args.protocol == "both":
        names = [cfg.data.protocol.rsplit("_", 1)[0] + "_t1",
                 cfg.data.protocol.rsplit("_", 1)[0] + "_t2"]
    else:
        names = [args.protocol or cfg.data.protocol]
    from .data import PROTOCOL_PRESETS
    produced = []
    columns = {}
    for name in names:
        if name not in PROTOCOL_PRESETS:
            raise UsageError(f"unknown protocol {name!r}")
        proto = PROTOCOL_PRESETS[name]()
        report = _eval_protocol(runner, manifest, proto, cfg)
        columns[proto.name] = report
        stem = out / f"report_{name}"
        Path(f"{stem}.json").write_text(report.to_json())
        Path(f"{stem}_pr.svg").write_text(pr_curves_svg(
            report.curves, report.class_names,
            title=f"Precision-Recall ({proto.name})"))
        Path(f"{stem}_confusion.svg").write_text(confusion_svg(
            report.confusion, report.class_names,
            title=f"Confusion matrix ({proto.name})"))
        produced += [Path(f"{stem}.json"), Path(f"{stem}_pr.svg"),
                     Path(f"{stem}_confusion.svg")]
        print(f"{proto.name}: mAP@0.5 = {report.map50:.4f} "
              f"(TP {report.tp} / FP {report.fp} / FN {report.fn})")
    if len(columns) > 1:
        bars = comparison_bars_svg(
            {name: rep.map50 for name, rep in columns.items()},
            title="mAP@0.5 by protocol")
        (out / "protocol_comparison.svg").write_text(bars)
        produced.append(out / "protocol_comparison.svg")
        combined = {name: rep.to_dict() for name, rep in columns.items()}
        (out / "report_combined.json").write_text(
            json.dumps(combined, sort_keys=True, indent=2) + "\n")
        produced.append(out / "report_combined.json")
    produced.append(_emit_effective_config(cfg, out))
    _write_files_index(out, produced)
    return EXIT_OK


def _annotate_image(image, dets, class_names):
    from PIL import Image, ImageDraw
    img = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8),
                          mode="L").convert("RGB")
    draw = ImageDraw.Draw(img)
    colors = ["#ff4444", "#44ff44", "#4488ff", "#ffcc00"]
    for d in dets:
        color = colors[d.class_id % len(colors)]
        draw.rectangle([d.x1, d.y1, d.x2, d.y2], outline=color)
        name = class_names[d.class_id] if d.class_id < len(class_names) \
            else str(d.class_id)
        draw.text((d.x1 + 1, max(d.y1 - 10, 0)),
                  f"{name} {d.confidence:.2f}", fill=color)
    return img


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"missing checkpoint {args.checkpoint}")
    runner = runner_from_checkpoint(args.checkpoint)
    out = _out_dir(args)
    from .data import load_image
    conf = args.conf if args.conf is not None else cfg.eval.detect_conf
    nms_iou = args.iou if args.iou is not None else cfg.eval.nms_iou
    per_image = []
    produced = []
    for image_path in args.images:
        p = Path(image_path)
        if not p.exists():
            raise UsageError(f"missing image {p}")
        image = load_image(p)
        dets = _predict_detections(runner, _as_sample(image),
                                   cfg.anchor_set(), conf, nms_iou)
        per_image.append((p.name, dets))
        annotated = _annotate_image(image, dets, cfg.data.synth.class_names)
        apath = out / f"{p.stem}_annotated.png"
        annotated.save(apath)
        produced.append(apath)
        print(f"{p.name}: {len(dets)} detections")
    dets_path = out / "detections.jsonl"
    write_detections_jsonl(dets_path, per_image)
    produced.append(dets_path)
    _write_files_index(out, produced)
    return EXIT_OK


def _as_sample(image):
    from .augment import Sample, empty_boxes
    return Sample(image=image, boxes=empty_boxes())


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    graph = build_graph(cfg.model)
    params = count_parameters(graph)
    gflops = count_flops(graph) / 1e9
    shapes = graph.infer_shapes(cfg.model.input_size)
    levels = {lv: shapes[name] for lv, name in graph.outputs.items()}
    if args.json:
        doc = {"parameters": params, "gflops": gflops,
               "input_size": cfg.model.input_size,
               "neck_kind": cfg.model.neck_kind,
               "head_levels": list(cfg.model.head_levels),
               "grids": {lv: [c, h, w] for lv, (c, h, w)
                         in sorted(levels.items())}}
        print(json.dumps(doc, sort_keys=True, indent=2))
    else:
        print(f"neck: {cfg.model.neck_kind}  "
              f"levels: {','.join(cfg.model.head_levels)}")
        print(f"parameters: {params:,}")
        print(f"GFLOPs @ {cfg.model.input_size}: {gflops:.2f}")
        for lv, (c, h, w) in sorted(levels.items()):
            print(f"  {lv}: {h}x{w} grid, {c} channels, "
                  f"stride {graph.strides[lv]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tirdet",
        description="thermal-infrared detector: synthesize data, train, "
                    "evaluate, detect, inspect")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="run-config YAML")
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True,
                           help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="image count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="dataset manifest.json")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--img", type=int, default=None, help="input size")
    p.add_argument("--mode", choices=["scratch", "transfer"], default=None)
    p.add_argument("--weights", default=None,
                   help="source checkpoint for transfer mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset manifest.json")
    p.add_argument("--protocol", default=None,
                   help="ds1_t1 / ds1_t2 / ds2_t1 / ds2_t2 / both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run detection on images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--iou", type=float, default=None)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("inspect", help="print parameters, GFLOPs, shapes")
    common(p, out=False)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, ProtocolError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
