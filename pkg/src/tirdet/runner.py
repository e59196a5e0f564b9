"""Torch materialization of a ModelGraph and the deterministic forward pass.

The graph (graph.py) stays the source of truth: the module tree is built
node-by-node from the LayerSpecs, and the torch parameter count must equal
count_parameters(graph) exactly (asserted at construction). Single
precision, direct convolutions, CPU-oriented.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .graph import ModelGraph, ShapeError, count_parameters


def _pad(k):
    # stride-2 convs keep out = in/2, stride-1 convs keep size
    return (k - 1) // 2 if k % 2 else k // 2 - 1


class ConvBNAct(nn.Module):
    def __init__(self, cin, cout, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, s, _pad(k), bias=True)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c, shortcut=True):
        super().__init__()
        self.cv1 = ConvBNAct(c, c, 1)
        self.cv2 = ConvBNAct(c, c, 3)
        self.add = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class CSPBlock(nn.Module):
    """Cross-stage partial block: split, bottleneck stack, merge."""

    def __init__(self, cin, cout, repeats=1, shortcut=True):
        super().__init__()
        hidden = cout // 2
        self.cv1 = ConvBNAct(cin, hidden, 1)
        self.cv2 = ConvBNAct(cin, hidden, 1)
        self.cv3 = ConvBNAct(2 * hidden, cout, 1)
        self.m = nn.Sequential(*(Bottleneck(hidden, shortcut)
                                 for _ in range(repeats)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), 1))


class SPPF(nn.Module):
    def __init__(self, cin, cout, k=5):
        super().__init__()
        hidden = cin // 2
        self.cv1 = ConvBNAct(cin, hidden, 1)
        self.cv2 = ConvBNAct(4 * hidden, cout, 1)
        self.pool = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        x = self.cv1(x)
        y1 = self.pool(x)
        y2 = self.pool(y1)
        y3 = self.pool(y2)
        return self.cv2(torch.cat((x, y1, y2, y3), 1))


class WeightedFusion(nn.Module):
    """Fast normalized fusion with learnable nonnegative stream weights."""

    def __init__(self, arity, epsilon):
        super().__init__()
        self.weights = nn.Parameter(torch.ones(arity))
        self.epsilon = epsilon

    def forward(self, xs):
        w = torch.relu(self.weights)
        acc = w[0] * xs[0]
        for wi, x in zip(w[1:], xs[1:]):
            acc = acc + wi * x
        return acc / (self.epsilon + w.sum())


class Head(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, bias=True)

    def forward(self, x):
        return self.conv(x)


def _materialize(spec, epsilon):
    if spec.kind in ("conv_bn_act", "downsample"):
        return ConvBNAct(spec.channels_in, spec.channels_out,
                         spec.kernel, spec.stride)
    if spec.kind == "csp_block":
        return CSPBlock(spec.channels_in, spec.channels_out,
                        spec.repeats, spec.shortcut)
    if spec.kind == "sppf":
        return SPPF(spec.channels_in, spec.channels_out, spec.kernel)
    if spec.kind == "upsample":
        return nn.Upsample(scale_factor=2, mode="nearest")
    if spec.kind == "fusion":
        return WeightedFusion(spec.fusion_arity, epsilon)
    if spec.kind == "head":
        return Head(spec.channels_in, spec.channels_out)
    raise ShapeError(f"cannot materialize kind {spec.kind!r}")


class GraphRunner(nn.Module):
    """Executable detector built from a ModelGraph.

    forward(x) with x of shape (batch, image_channels, size, size) returns
    {level: (batch, ny, nx, anchors, 5 + num_classes)} raw logits.
    """

    def __init__(self, graph: ModelGraph):
        super().__init__()
        self.graph = graph
        cfg = graph.config
        self.mods = nn.ModuleDict(
            {spec.name: _materialize(spec, cfg.fusion_epsilon)
             for spec in graph.nodes})
        self.na = cfg.anchors_per_level
        self.no = 5 + cfg.num_classes
        got = sum(p.numel() for p in self.parameters())
        want = count_parameters(graph)
        if got != want:
            raise ShapeError(f"torch parameters {got} != graph count {want}")

    def forward(self, x):
        cfg = self.graph.config
        if x.ndim != 4 or x.shape[1] != cfg.image_channels:
            raise ShapeError(f"expected (B,{cfg.image_channels},H,W), "
                             f"got {tuple(x.shape)}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeError(f"expected input size {cfg.input_size}, "
                             f"got {tuple(x.shape[2:])}")
        cache = {}
        for spec in self.graph.nodes:
            ins = [cache[s] for s in spec.inputs] if spec.inputs else [x]
            mod = self.mods[spec.name]
            if spec.kind == "fusion":
                out = mod(ins)
            elif len(ins) > 1:
                out = mod(torch.cat(ins, 1))
            else:
                out = mod(ins[0])
            cache[spec.name] = out
        preds = {}
        for lv, name in self.graph.outputs.items():
            y = cache[name]
            b, _, ny, nx = y.shape
            preds[lv] = (y.view(b, self.na, self.no, ny, nx)
                          .permute(0, 3, 4, 1, 2).contiguous())
        return preds

    def predict(self, images) -> dict:
        """Deterministic inference on a numpy batch (B, H, W) in [0, 1].

        Runs in eval mode (running-stat normalization), so per-image outputs
        are independent of the rest of the batch.
        """
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        x = torch.from_numpy(x[:, None])
        if self.graph.config.image_channels == 3:
            x = x.repeat(1, 3, 1, 1)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            preds = self.forward(x)
        if was_training:
            self.train()
        return {lv: p.numpy() for lv, p in preds.items()}

    def backbone_parameters(self):
        for name, mod in self.mods.items():
            if name.startswith("backbone_"):
                yield from mod.parameters()


def init_scratch(runner: GraphRunner, seed: int) -> GraphRunner:
    """Fan-in scaled random conv weights, zero biases, identity norms,
    unit fusion weights. Deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in runner.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.running_mean.zero_()
                mod.running_var.fill_(1.0)
            elif isinstance(mod, WeightedFusion):
                mod.weights.fill_(1.0)
    return runner


def apply_head_priors(runner: GraphRunner, objects_per_image=8.0):
    """Detection-prior bias on the head convs.

    Objectness biases start at log(k / cells) so the initial foreground
    rate matches a few objects per image instead of 50%; class biases get
    a mild negative prior. Without this the background suppression
    gradient floods the shared heads early and box regression stalls.
    """
    cfg = runner.graph.config
    nc = cfg.num_classes
    shapes = runner.graph.infer_shapes(cfg.input_size)
    with torch.no_grad():
        for lv, name in runner.graph.outputs.items():
            _, ny, nx = shapes[name]
            bias = runner.mods[name].conv.bias.view(runner.na, runner.no)
            bias[:, 4] += math.log(objects_per_image / (ny * nx))
            if nc > 1:
                bias[:, 5:] += math.log(0.6 / (nc - 0.99))
    return runner
