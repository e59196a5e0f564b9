"""Composite detection loss and an independent gradient checker.

Three terms over the per-level prediction grids:
  box  - mean(1 - CIoU) over assigned slots, decoded in grid units
  obj  - per-level balanced BCE against soft objectness targets
         (detached CIoU clamped to [0, 1] at assigned slots, 0 elsewhere)
  cls  - focal-modulated BCE on the class vector at assigned slots

total = lambda_box * box + lambda_obj * obj + lambda_cls * cls
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .anchors import AnchorSet, TargetAssignment
from .graph import STRIDES

# objectness balance per level; small-object levels weigh more
BALANCE_4LEVEL = {"P2": 4.0, "P3": 1.0, "P4": 0.4, "P5": 0.1}
BALANCE_3LEVEL = {"P3": 4.0, "P4": 1.0, "P5": 0.4}


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5

    def validate(self):
        if min(self.box, self.obj, self.cls) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    box: float
    obj: float
    cls: float
    total: float
    n_assigned: int


def _check_box(b):
    if b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"degenerate box {tuple(b)}")


def ciou(a, b, eps=1e-10):
    """Complete IoU of two (cx, cy, w, h) pixel boxes, in (-1, 1].

    IoU minus the center-distance and aspect-consistency penalties;
    equals 1 iff the boxes are identical, never exceeds plain IoU.
    """
    _check_box(a)
    _check_box(b)
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, \
        a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, \
        b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    iou = inter / union
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    rho2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    v = (4.0 / math.pi ** 2) * (math.atan(b[2] / b[3])
                                - math.atan(a[2] / a[3])) ** 2
    alpha = v / (1.0 - iou + v + eps)
    return iou - rho2 / c2 - alpha * v


def ciou_pairs(pred, target, eps=1e-10, detach_alpha=True):
    """Vectorized differentiable CIoU for (n, 4) torch boxes (cx, cy, w, h).

    detach_alpha stops gradients through the aspect-term coupling factor
    (training convention); the gradient gate disables it so central
    differences agree with autograd.
    """
    pcx, pcy, pw, ph = pred.unbind(-1)
    tcx, tcy, tw, th = target.unbind(-1)
    px1, px2 = pcx - pw / 2, pcx + pw / 2
    py1, py2 = pcy - ph / 2, pcy + ph / 2
    tx1, tx2 = tcx - tw / 2, tcx + tw / 2
    ty1, ty2 = tcy - th / 2, tcy + th / 2
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = pw * ph + tw * th - inter
    iou = inter / union
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    c2 = cw * cw + ch * ch
    rho2 = (pcx - tcx) ** 2 + (pcy - tcy) ** 2
    v = (4.0 / math.pi ** 2) * (torch.atan(tw / th) - torch.atan(pw / ph)) ** 2
    alpha = v / (1.0 - iou + v + eps)
    if detach_alpha:
        alpha = alpha.detach()
    return iou - rho2 / c2 - alpha * v


def focal_bce(pred_logit, target, gamma=0.3):
    """Binary cross-entropy with (1 - p_t)^gamma modulation.

    gamma = 0 is plain BCE; soft targets in [0, 1] are allowed.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    x, t = float(pred_logit), float(target)
    bce = max(x, 0.0) - x * t + math.log1p(math.exp(-abs(x)))
    p = 1.0 / (1.0 + math.exp(-x))
    pt = t * p + (1.0 - t) * (1.0 - p)
    return (1.0 - pt) ** gamma * bce


def _focal_bce_t(logits, targets, gamma):
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="none")
    if gamma == 0:
        return bce
    p = torch.sigmoid(logits)
    pt = targets * p + (1.0 - targets) * (1.0 - p)
    # gamma < 1 makes d/dx (1-pt)^gamma blow up as pt -> 1; the clamp keeps
    # saturated predictions (loss contribution ~1e-8) finite in backward
    return (1.0 - pt).clamp(min=1e-6) ** gamma * bce


def _balance(levels):
    table = BALANCE_4LEVEL if "P2" in levels else BALANCE_3LEVEL
    return {lv: table.get(lv, 1.0) for lv in levels}


def _gather_level(assignments, level):
    """Index arrays for one level from per-image assignment lists."""
    b, r, c, a, off, wh, cls = [], [], [], [], [], [], []
    for bi, per_image in enumerate(assignments):
        for asn in per_image:
            if asn.level != level:
                continue
            b.append(bi)
            r.append(asn.cell[0])
            c.append(asn.cell[1])
            a.append(asn.anchor_index)
            off.append(asn.offsets)
            wh.append(asn.size_px)
            cls.append(asn.box.class_id)
    return b, r, c, a, off, wh, cls


def total_loss_tensor(predictions, assignments, anchors: AnchorSet,
                      weights=LossWeights(), gamma=0.3, obj_focal=False,
                      differentiable_targets=False):
    """Differentiable composite loss.

    predictions: {level: (B, ny, nx, na, 5+nc) torch tensor of raw logits}
    assignments: per-image lists of TargetAssignment (len = batch size)
    Returns (scalar tensor, LossBreakdown).

    differentiable_targets removes the intentional stop-gradients (soft
    objectness labels, CIoU alpha) so the result is a smooth function whose
    autograd gradient equals the true derivative; used by the finite-
    difference gradient gate. Training keeps the default (detached) form.
    """
    weights.validate()
    levels = sorted(predictions, key=lambda lv: STRIDES[lv])
    some = predictions[levels[0]]
    dtype, device = some.dtype, some.device
    nc = some.shape[-1] - 5
    bsz = some.shape[0]
    if isinstance(assignments, (list, tuple)) and assignments and \
            isinstance(assignments[0], TargetAssignment):
        assignments = [assignments]   # single-image convenience
    if len(assignments) != bsz:
        raise ValueError(f"{len(assignments)} assignment lists for "
                         f"batch of {bsz}")
    balance = _balance(levels)

    zero = torch.zeros((), dtype=dtype, device=device)
    box_sum, cls_sum = zero.clone(), zero.clone()
    n_box, n_cls_el = 0, 0
    obj_total = zero.clone()
    n_assigned = 0

    for lv in levels:
        preds = predictions[lv]
        _, ny, nx, na, _ = preds.shape
        stride = STRIDES[lv]
        tobj = torch.zeros((bsz, ny, nx, na), dtype=dtype, device=device)
        b, r, c, a, off, wh, cls = _gather_level(assignments, lv)
        if b:
            n_assigned += len(b)
            bi = torch.tensor(b, device=device)
            ri = torch.tensor(r, device=device)
            ci = torch.tensor(c, device=device)
            ai = torch.tensor(a, device=device)
            ps = preds[bi, ri, ci, ai]                       # (n, 5+nc)
            anchor_wh = torch.tensor(
                [anchors.per_level[lv][i] for i in a],
                dtype=dtype, device=device) / stride
            pxy = 2.0 * torch.sigmoid(ps[:, 0:2]) - 0.5
            pwh = (2.0 * torch.sigmoid(ps[:, 2:4])) ** 2 * anchor_wh
            pbox = torch.cat((pxy, pwh), 1)
            toff = torch.tensor(off, dtype=dtype, device=device)
            twh = torch.tensor(wh, dtype=dtype, device=device) / stride
            tbox = torch.cat((toff, twh), 1)
            iou = ciou_pairs(pbox, tbox,
                             detach_alpha=not differentiable_targets)
            box_sum = box_sum + (1.0 - iou).sum()
            n_box += len(b)
            # soft objectness target, order-independent via max-reduce
            flat = ((bi * ny + ri) * nx + ci) * na + ai
            if differentiable_targets:
                tobj = tobj.view(-1).index_put(
                    (flat,), iou.clamp(0.0, 1.0)).view(bsz, ny, nx, na)
            else:
                tobj.view(-1).scatter_reduce_(
                    0, flat, iou.detach().clamp(0.0, 1.0), reduce="amax")
            if nc > 1:
                tcls = torch.zeros((len(b), nc), dtype=dtype, device=device)
                tcls[torch.arange(len(b)), cls] = 1.0
                cls_sum = cls_sum + _focal_bce_t(ps[:, 5:], tcls, gamma).sum()
                n_cls_el += len(b) * nc
        obj_gamma = gamma if obj_focal else 0.0
        obj_loss = _focal_bce_t(preds[..., 4], tobj, obj_gamma).mean()
        obj_total = obj_total + balance[lv] * obj_loss

    box = box_sum / n_box if n_box else zero
    cls = cls_sum / n_cls_el if n_cls_el else zero
    total = weights.box * box + weights.obj * obj_total + weights.cls * cls
    breakdown = LossBreakdown(box=float(box.detach()),
                              obj=float(obj_total.detach()),
                              cls=float(cls.detach()),
                              total=float(total.detach()),
                              n_assigned=n_assigned)
    return total, breakdown


def total_loss(predictions, assignments, anchors, weights=LossWeights(),
               gamma=0.3, obj_focal=False) -> LossBreakdown:
    """Non-differentiable wrapper over total_loss_tensor; accepts numpy or
    torch grids."""
    preds = {lv: torch.as_tensor(p) for lv, p in predictions.items()}
    with torch.no_grad():
        _, breakdown = total_loss_tensor(preds, assignments, anchors,
                                         weights, gamma, obj_focal)
    return breakdown


# ---------------------------------------------------------------------------
# finite-difference gradient verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_coord: tuple          # (param index, flat element index)
    analytic: float             # analytic derivative at the worst coordinate
    numeric: float              # central difference at the worst coordinate
    n_checked: int

    def __str__(self):
        return (f"max rel error {self.max_rel_error:.3e} at coord "
                f"{self.worst_coord} (analytic {self.analytic:.6e}, "
                f"numeric {self.numeric:.6e}, {self.n_checked} coords)")


def check_gradients(loss_fn, params, epsilon=1e-3, n_coords=200,
                    seed=0) -> GradCheckResult:
    """Compare autograd gradients of loss_fn() against central differences.

    loss_fn must be a deterministic scalar function of params (a list of
    leaf tensors, modified in place for the probes). Samples n_coords
    coordinates without replacement when possible. Relative error uses a
    floor tied to the overall gradient scale so that coordinates with
    negligible gradient cannot dominate through roundoff.
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g
             for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    n = min(n_coords, total)
    flat_ids = rng.choice(total, size=n, replace=False)

    # coordinates with gradient negligible against the overall scale are
    # judged on absolute error; everything else on true relative error
    gscale = max(float(torch.max(torch.abs(g))) for g in grads)
    floor = max(1e-6 * gscale, 1e-12)

    bounds = np.cumsum([0] + sizes)
    worst = (-1.0, (0, 0), 0.0, 0.0)
    for fid in flat_ids:
        pi = int(np.searchsorted(bounds, fid, side="right") - 1)
        ei = int(fid - bounds[pi])
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[ei].item()
            p.view(-1)[ei] = orig + epsilon
            f_plus = float(loss_fn())
            p.view(-1)[ei] = orig - epsilon
            f_minus = float(loss_fn())
            p.view(-1)[ei] = orig
        fd = (f_plus - f_minus) / (2.0 * epsilon)
        an = float(grads[pi].view(-1)[ei])
        rel = abs(an - fd) / max(abs(an), abs(fd), floor)
        if rel > worst[0]:
            worst = (rel, (pi, ei), an, fd)
    return GradCheckResult(max_rel_error=worst[0], worst_coord=worst[1],
                           analytic=worst[2], numeric=worst[3], n_checked=n)


def gradient_gate(seed=0, n_coords=200, epsilon=1e-3,
                  num_classes=2) -> GradCheckResult:
    """Verify the full composite loss gradient on the tiny two-block detector.

    The single-precision substrate is promoted to float64 for evaluation:
    central differences at epsilon=1e-3 cannot resolve small-gradient
    coordinates through float32 roundoff. Targets are placed away from cell
    fraction and clamp boundaries so the loss is smooth at the probe point.
    Run before real training; max_rel_error must stay under 1e-3.
    """
    from .anchors import BBox, assign_targets, default_anchors
    from .graph import tiny_graph
    from .runner import GraphRunner, init_scratch

    graph = tiny_graph(num_classes=num_classes)
    runner = init_scratch(GraphRunner(graph), seed=seed).double()
    runner.train()
    rng = np.random.default_rng(seed)
    imgs = torch.from_numpy(rng.random((2, 1, 8, 8)))
    aset = default_anchors(["P2"])
    grids = {"P2": (2, 2)}
    assignments = []
    for _ in range(2):
        gts = [BBox(cx=float(rng.uniform(0.3, 0.7)),
                    cy=float(rng.uniform(0.3, 0.7)),
                    w=float(rng.uniform(0.4, 0.8)),
                    h=float(rng.uniform(0.4, 0.8)),
                    class_id=int(rng.integers(0, num_classes)))]
        assignments.append(assign_targets(gts, aset, grids)[0])
    params = list(runner.parameters())

    def loss_fn():
        preds = runner.forward(imgs)
        loss, _ = total_loss_tensor(preds, assignments, aset,
                                    differentiable_targets=True)
        return loss

    return check_gradients(loss_fn, params, epsilon=epsilon,
                           n_coords=n_coords, seed=seed)
