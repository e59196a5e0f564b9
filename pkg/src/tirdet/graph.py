"""Declarative detector graphs: backbone, fusion neck, detection heads.

The graph is the source of truth for parameter counts, FLOP counts and
forward shapes. It is a plain data structure; the torch materialization
lives in runner.py so counting stays independent of any tensor library.

Two stock configurations are provided:
  * baseline_config()  - CSP backbone, path-aggregation neck, P3/P4/P5 heads
  * bifpn_p2_config()  - same backbone, weighted bidirectional fusion neck
                         with an extra stride-4 (P2) head for small targets
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

GRAPH_FORMAT_VERSION = 1

LEVELS = ("P2", "P3", "P4", "P5")
STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32}

# epsilon of the normalized weighted fusion (fast fusion)
FUSION_EPS = 1e-4

LAYER_KINDS = ("conv_bn_act", "csp_block", "sppf", "upsample", "downsample",
               "fusion", "head")


class ConfigError(ValueError):
    """Invalid model configuration, names the violated invariant."""


class ShapeError(ValueError):
    """Tensor/graph shape mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_size: int = 640
    width_multiple: float = 0.50
    depth_multiple: float = 0.33
    neck_kind: str = "pan"                      # "pan" | "bifpn"
    head_levels: tuple = ("P3", "P4", "P5")
    fusion_epsilon: float = FUSION_EPS
    anchors_per_level: int = 3
    rgb_stem: bool = False                      # thermal frames are 1-channel

    @property
    def image_channels(self) -> int:
        return 3 if self.rgb_stem else 1

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size % 32 != 0:
            raise ConfigError(f"input_size {self.input_size} not divisible by 32")
        if not self.head_levels:
            raise ConfigError("head_levels is empty")
        levels = tuple(self.head_levels)
        for lv in levels:
            if lv not in LEVELS:
                raise ConfigError(f"unknown head level {lv!r}")
        idx = sorted(LEVELS.index(lv) for lv in levels)
        if len(set(idx)) != len(idx) or idx != list(range(idx[0], idx[-1] + 1)):
            raise ConfigError(f"head_levels {levels} must be contiguous and unique")
        if not (0.0 < self.width_multiple <= 1.0 and 0.0 < self.depth_multiple <= 1.0):
            raise ConfigError("width/depth multiples must lie in (0, 1]")
        if self.fusion_epsilon <= 0.0:
            raise ConfigError("fusion_epsilon must be > 0")
        if self.anchors_per_level < 1:
            raise ConfigError("anchors_per_level must be >= 1")

    def sorted_levels(self) -> list:
        return sorted(self.head_levels, key=LEVELS.index)


def baseline_config(num_classes, **kw) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, neck_kind="pan",
                       head_levels=("P3", "P4", "P5"), **kw)


def bifpn_p2_config(num_classes, **kw) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, neck_kind="bifpn",
                       head_levels=("P2", "P3", "P4", "P5"), **kw)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple                 # producer node names; () for the image input
    channels_in: int
    channels_out: int
    kernel: int = 1
    stride: int = 1
    repeats: int = 1              # csp_block bottleneck count
    shortcut: bool = True         # csp_block residual connections
    fusion_arity: int = 0
    level: str = ""               # head nodes only

    def validate(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.channels_in <= 0 or self.channels_out <= 0:
            raise ConfigError(f"{self.name}: channels must be positive")
        if self.kind == "fusion" and self.fusion_arity < 2:
            raise ConfigError(f"{self.name}: fusion_arity must be >= 2")


@dataclass
class ModelGraph:
    config: ModelConfig
    nodes: list = field(default_factory=list)         # ordered LayerSpec list
    outputs: dict = field(default_factory=dict)       # level -> head node name
    strides: dict = field(default_factory=dict)       # level -> int

    def node(self, name) -> LayerSpec:
        return self._by_name[name]

    @property
    def _by_name(self):
        return {n.name: n for n in self.nodes}

    def head_out_channels(self) -> int:
        return self.config.anchors_per_level * (5 + self.config.num_classes)

    def validate(self):
        seen = set()
        for spec in self.nodes:
            spec.validate()
            for src in spec.inputs:
                if src not in seen:
                    raise ConfigError(
                        f"{spec.name}: input {src!r} undefined or later in order "
                        "(graph must be acyclic and topologically ordered)")
            if spec.name in seen:
                raise ConfigError(f"duplicate node name {spec.name!r}")
            seen.add(spec.name)
        for lv in self.config.sorted_levels():
            if lv not in self.outputs:
                raise ConfigError(f"missing output node for level {lv}")
        # shape inference doubles as the channel/spatial consistency check
        self.infer_shapes(self.config.input_size)

    def infer_shapes(self, input_size) -> dict:
        """Resolve (channels, height, width) per node at the given input size.

        Non-fusion nodes with several inputs concatenate them along channels;
        fusion nodes require identical shapes on every input.
        """
        max_stride = max(self.strides.values()) if self.strides else 32
        if input_size % max_stride != 0:
            raise ShapeError(f"input size {input_size} not divisible by "
                             f"the coarsest stride {max_stride}")
        by = {}
        img = (self.config.image_channels, input_size, input_size)
        for spec in self.nodes:
            ins = [by[s] for s in spec.inputs] if spec.inputs else [img]
            c0, h0, w0 = ins[0]
            if any((h, w) != (h0, w0) for _, h, w in ins):
                raise ShapeError(f"{spec.name}: inputs disagree on spatial size "
                                 f"{[(h, w) for _, h, w in ins]}")
            if spec.kind == "fusion":
                if any(c != c0 for c, _, _ in ins):
                    raise ShapeError(f"{spec.name}: fusion inputs disagree on "
                                     f"channels {[c for c, _, _ in ins]}")
                if len(ins) != spec.fusion_arity:
                    raise ShapeError(f"{spec.name}: fusion arity {spec.fusion_arity} "
                                     f"!= {len(ins)} inputs")
                cin = c0
            else:
                cin = sum(c for c, _, _ in ins)
            if cin != spec.channels_in:
                raise ShapeError(f"{spec.name}: declared channels_in "
                                 f"{spec.channels_in} != inferred {cin}")
            if spec.kind == "upsample":
                h, w = h0 * 2, w0 * 2
            elif spec.stride == 2:
                h, w = h0 // 2, w0 // 2
            else:
                h, w = h0, w0
            by[spec.name] = (spec.channels_out, h, w)
        for lv, name in self.outputs.items():
            _, h, w = by[name]
            if h * self.strides[lv] != input_size:
                raise ShapeError(f"{lv} grid {h} x stride {self.strides[lv]} "
                                 f"!= input {input_size}")
        return by

    def to_dict(self) -> dict:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "config": asdict(self.config),
            "nodes": [asdict(n) for n in self.nodes],
            "outputs": dict(self.outputs),
            "strides": dict(self.strides),
        }

    def to_json(self) -> str:
        # stable key order so equal configs produce byte-identical documents
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# graph construction


def _make_divisible(x, divisor=8) -> int:
    return int(math.ceil(x / divisor) * divisor)


def _scaled(channels, width_multiple) -> int:
    return _make_divisible(channels * width_multiple, 8)


def _depth(n, depth_multiple) -> int:
    return max(round(n * depth_multiple), 1)


class _Builder:
    def __init__(self, config):
        self.cfg = config
        self.nodes = []
        self.ch = {}

    def add(self, name, kind, inputs, cout, **kw):
        ins = tuple(inputs)
        if kind == "fusion":
            cin = self.ch[ins[0]]
            kw.setdefault("fusion_arity", len(ins))
        elif not ins:
            cin = self.cfg.image_channels
        else:
            cin = sum(self.ch[s] for s in ins)
        spec = LayerSpec(name=name, kind=kind, inputs=ins,
                         channels_in=cin, channels_out=cout, **kw)
        self.nodes.append(spec)
        self.ch[name] = cout
        return name


def build_graph(config: ModelConfig) -> ModelGraph:
    """Build and validate the detector graph for a configuration.

    Pure function of the config: equal configs yield byte-identical
    serializations. neck_kind="pan" with levels {P3,P4,P5} is the baseline
    model; neck_kind="bifpn" with levels {P2..P5} is the modified model.
    """
    config.validate()
    if config.neck_kind not in ("pan", "bifpn"):
        raise ConfigError(f"unknown neck_kind {config.neck_kind!r}")
    levels = config.sorted_levels()
    if "P2" in levels and config.input_size % 4 != 0:
        raise ConfigError("input_size must be divisible by 4 when P2 present")

    w = lambda c: _scaled(c, config.width_multiple)
    d = lambda n: _depth(n, config.depth_multiple)
    b = _Builder(config)

    # backbone: stride doubles at each stage, taps feed the neck
    b.add("backbone_stem", "downsample", (), w(64), kernel=6, stride=2)
    b.add("backbone_p2_down", "downsample", ("backbone_stem",), w(128),
          kernel=3, stride=2)
    b.add("backbone_p2_csp", "csp_block", ("backbone_p2_down",), w(128),
          repeats=d(3))
    b.add("backbone_p3_down", "downsample", ("backbone_p2_csp",), w(256),
          kernel=3, stride=2)
    b.add("backbone_p3_csp", "csp_block", ("backbone_p3_down",), w(256),
          repeats=d(6))
    b.add("backbone_p4_down", "downsample", ("backbone_p3_csp",), w(512),
          kernel=3, stride=2)
    b.add("backbone_p4_csp", "csp_block", ("backbone_p4_down",), w(512),
          repeats=d(9))
    b.add("backbone_p5_down", "downsample", ("backbone_p4_csp",), w(1024),
          kernel=3, stride=2)
    b.add("backbone_p5_csp", "csp_block", ("backbone_p5_down",), w(1024),
          repeats=d(3))
    b.add("backbone_sppf", "sppf", ("backbone_p5_csp",), w(1024), kernel=5)

    taps = {"P2": "backbone_p2_csp", "P3": "backbone_p3_csp",
            "P4": "backbone_p4_csp", "P5": "backbone_sppf"}
    # per-level working width of the neck; the P2 stage runs at half the
    # backbone tap width to keep the extra high-resolution head lean
    neck_ch = {"P5": w(1024) // 2, "P4": w(512), "P3": w(256),
               "P2": w(128) // 2}
    head_ch = {"P5": w(1024), "P4": w(512), "P3": w(256), "P2": w(128) // 2}

    heads_from = (_build_pan(b, config, levels, taps, neck_ch, head_ch)
                  if config.neck_kind == "pan" else
                  _build_bifpn(b, config, levels, taps, neck_ch, head_ch))

    outputs = {}
    out_ch = config.anchors_per_level * (5 + config.num_classes)
    for lv in levels:
        outputs[lv] = b.add(f"head_{lv.lower()}", "head", (heads_from[lv],),
                            out_ch, level=lv)

    graph = ModelGraph(config=config, nodes=b.nodes, outputs=outputs,
                       strides={lv: STRIDES[lv] for lv in levels})
    graph.validate()
    return graph


def _build_pan(b, config, levels, taps, neck_ch, head_ch) -> dict:
    """Path-aggregation neck: concat merges, top-down then bottom-up."""
    d = lambda n: _depth(n, config.depth_multiple)
    lo = LEVELS.index(levels[0])
    order = [LEVELS[i] for i in range(lo, LEVELS.index("P5") + 1)]
    heads_from = {}

    laterals = {}
    cur = taps["P5"]
    for upper, lower in zip(order[::-1], order[::-1][1:]):
        lat = b.add(f"neck_lat_{upper.lower()}", "conv_bn_act", (cur,),
                    neck_ch[lower], kernel=1)
        laterals[upper] = lat
        up = b.add(f"neck_up_{lower.lower()}", "upsample", (lat,),
                   b.ch[lat])
        cur = b.add(f"neck_td_{lower.lower()}_csp", "csp_block",
                    (up, taps[lower]), head_ch[lower] if lower == order[0]
                    else neck_ch[lower], repeats=d(3), shortcut=False)
    heads_from[order[0]] = cur

    for lower, upper in zip(order, order[1:]):
        down = b.add(f"neck_down_{upper.lower()}", "downsample", (cur,),
                     b.ch[cur], kernel=3, stride=2)
        cur = b.add(f"neck_bu_{upper.lower()}_csp", "csp_block",
                    (down, laterals[upper]), head_ch[upper],
                    repeats=d(3), shortcut=False)
        heads_from[upper] = cur
    return heads_from


def _build_bifpn(b, config, levels, taps, neck_ch, head_ch) -> dict:
    """Weighted bidirectional fusion neck over the head levels.

    Every fusion node averages its inputs with learnable nonnegative
    weights (fast normalized fusion); 1x1 convs harmonize channels onto
    the per-level working width before fusing. Interior levels fuse three
    streams on the bottom-up pass (tap, top-down state, upsweep), the two
    end levels fuse two.
    """
    d = lambda n: _depth(n, config.depth_multiple)
    lo = LEVELS.index(levels[0])
    order = [LEVELS[i] for i in range(lo, LEVELS.index("P5") + 1)]
    heads_from = {}

    # project taps onto the working widths where they differ
    proj = {}
    for lv in order:
        if b.ch[taps[lv]] != neck_ch[lv]:
            proj[lv] = b.add(f"neck_proj_{lv.lower()}", "conv_bn_act",
                             (taps[lv],), neck_ch[lv], kernel=1)
        else:
            proj[lv] = taps[lv]

    td = {"P5": proj["P5"]}
    cur = proj["P5"]
    for upper, lower in zip(order[::-1], order[::-1][1:]):
        if b.ch[cur] != neck_ch[lower]:
            cur = b.add(f"neck_lat_{lower.lower()}", "conv_bn_act", (cur,),
                        neck_ch[lower], kernel=1)
        up = b.add(f"neck_up_{lower.lower()}", "upsample", (cur,), b.ch[cur])
        fuse = b.add(f"neck_td_{lower.lower()}_fuse", "fusion",
                     (up, proj[lower]), neck_ch[lower])
        cur = b.add(f"neck_td_{lower.lower()}_csp", "csp_block", (fuse,),
                    neck_ch[lower], repeats=d(3), shortcut=False)
        td[lower] = cur
    heads_from[order[0]] = cur

    for lower, upper in zip(order, order[1:]):
        down = b.add(f"neck_down_{upper.lower()}", "downsample", (cur,),
                     neck_ch[upper], kernel=3, stride=2)
        streams = (down, td[upper], proj[upper]) if upper != "P5" \
            else (down, proj["P5"])
        fuse = b.add(f"neck_bu_{upper.lower()}_fuse", "fusion", streams,
                     neck_ch[upper])
        cur = b.add(f"neck_bu_{upper.lower()}_csp", "csp_block", (fuse,),
                    head_ch[upper], repeats=d(3), shortcut=False)
        heads_from[upper] = cur
    return heads_from


def tiny_graph(num_classes=2, channels=8, input_size=8,
               anchors_per_level=3) -> ModelGraph:
    """Miniature two-block detector (stem, csp, downsample, stride-4 head).

    Small enough for exhaustive finite-difference probing; used by the
    gradient gate before real training runs and by the test suite.
    """
    cfg = ModelConfig(num_classes=num_classes, input_size=input_size,
                      head_levels=("P2",), anchors_per_level=anchors_per_level)
    b = _Builder(cfg)
    b.add("backbone_stem", "downsample", (), channels, kernel=3, stride=2)
    b.add("backbone_csp", "csp_block", ("backbone_stem",), channels, repeats=1)
    b.add("backbone_p2_down", "downsample", ("backbone_csp",), 2 * channels,
          kernel=3, stride=2)
    out_ch = cfg.anchors_per_level * (5 + num_classes)
    head = b.add("head_p2", "head", ("backbone_p2_down",), out_ch, level="P2")
    graph = ModelGraph(config=cfg, nodes=b.nodes, outputs={"P2": head},
                       strides={"P2": 4})
    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# parameter and FLOP accounting
#
# conv_bn_act / downsample carry a conv weight, a conv bias and the two
# normalization affine vectors; head convs carry weight + bias only;
# fusion nodes carry one scalar weight per input stream.


def _conv_params(cin, cout, k) -> int:
    return k * k * cin * cout + cout + 2 * cout


def _head_params(cin, cout) -> int:
    return cin * cout + cout


def _csp_convs(spec):
    """Primitive convs of a cross-stage-partial block as (cin, cout, k)."""
    hidden = spec.channels_out // 2
    convs = [(spec.channels_in, hidden, 1),     # main path entry
             (spec.channels_in, hidden, 1),     # bypass entry
             (2 * hidden, spec.channels_out, 1)]
    for _ in range(spec.repeats):
        convs += [(hidden, hidden, 1), (hidden, hidden, 3)]
    return convs


def _sppf_convs(spec):
    hidden = spec.channels_in // 2
    return [(spec.channels_in, hidden, 1),
            (4 * hidden, spec.channels_out, 1)]


def node_parameters(spec: LayerSpec) -> int:
    if spec.kind in ("conv_bn_act", "downsample"):
        return _conv_params(spec.channels_in, spec.channels_out, spec.kernel)
    if spec.kind == "csp_block":
        return sum(_conv_params(*c) for c in _csp_convs(spec))
    if spec.kind == "sppf":
        return sum(_conv_params(*c) for c in _sppf_convs(spec))
    if spec.kind == "head":
        return _head_params(spec.channels_in, spec.channels_out)
    if spec.kind == "fusion":
        return spec.fusion_arity
    return 0  # upsample


def count_parameters(graph: ModelGraph) -> int:
    """Exact learnable-scalar count: conv weights and biases, normalization
    affine terms, head weights and biases, fusion weights."""
    return sum(node_parameters(n) for n in graph.nodes)


def _conv_flops(cin, cout, k, h, w) -> int:
    # multiply-accumulates as 2 flops, plus bias add and the fused
    # normalization/activation (2 + 4 flops per output element)
    return h * w * cout * (2 * k * k * cin + 1 + 2 + 4)


def node_flops(spec: LayerSpec, out_hw) -> int:
    h, w = out_hw
    if spec.kind in ("conv_bn_act", "downsample"):
        return _conv_flops(spec.channels_in, spec.channels_out, spec.kernel, h, w)
    if spec.kind == "csp_block":
        return sum(_conv_flops(ci, co, k, h, w) for ci, co, k in _csp_convs(spec))
    if spec.kind == "sppf":
        total = sum(_conv_flops(ci, co, k, h, w) for ci, co, k in _sppf_convs(spec))
        total += 3 * spec.kernel * spec.kernel * h * w * (spec.channels_in // 2)
        return total
    if spec.kind == "head":
        return h * w * spec.channels_out * (2 * spec.channels_in + 1)
    if spec.kind == "fusion":
        # relu + multiply per stream, sum and one divide per element
        return h * w * spec.channels_out * (3 * spec.fusion_arity + 1)
    return 0


def count_flops(graph: ModelGraph, input_size=None) -> int:
    """Total forward FLOPs at the given square input resolution."""
    size = graph.config.input_size if input_size is None else input_size
    shapes = graph.infer_shapes(size)
    return sum(node_flops(n, shapes[n.name][1:]) for n in graph.nodes)


# ---------------------------------------------------------------------------
# weighted fusion (the neck's merge primitive, exposed for direct use)


@dataclass
class FeatureMap:
    level: str
    values: np.ndarray            # (channels, height, width)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def spatial(self):
        return self.values.shape[1:]


def fuse_features(inputs, weights, epsilon=FUSION_EPS):
    """Fast normalized fusion: sum_i relu(w_i) * I_i / (eps + sum_j relu(w_j)).

    inputs may be FeatureMaps or bare arrays of identical shape; weights is
    one scalar per input. All-nonpositive weights yield a near-zero (finite)
    map rather than an error.
    """
    if len(inputs) < 2:
        raise ShapeError("fusion needs at least 2 inputs")
    if len(weights) != len(inputs):
        raise ShapeError(f"{len(weights)} weights for {len(inputs)} inputs")
    arrays = [i.values if isinstance(i, FeatureMap) else np.asarray(i)
              for i in inputs]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeError(f"fusion inputs disagree on shape: "
                         f"{[a.shape for a in arrays]}")
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    acc = np.zeros(shape, dtype=np.float64)
    for wi, a in zip(w, arrays):
        acc += wi * a
    out = acc / (epsilon + w.sum())
    if isinstance(inputs[0], FeatureMap):
        return FeatureMap(level=inputs[0].level, values=out)
    return out
