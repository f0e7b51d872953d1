"""Toy BEV detection: conv backbone, center-cell detection head, losses,
box decoding with greedy NMS, and average precision at IoU 0.3/0.5/0.7.

Boxes are axis-aligned (cx, cy, w, h) in grid-cell units with a score in
[0, 1]. Positive heatmap targets are the exact center cells of the
ground-truth boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
LAMBDA_REG = 1.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box {self.w}x{self.h}")


def iou(a, b):
    """Intersection over union of two axis-aligned boxes."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def init_backbone(graph, rng, c, in_channels=2, prefix="backbone"):
    """Three 3x3 convolutions with relu; keeps the spatial resolution."""
    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    p = {"c": c, "in_channels": in_channels}
    widths = [(in_channels, c), (c, c), (c, c)]
    for i, (cin, cout) in enumerate(widths):
        p[f"conv{i}"] = (
            graph.parameter(f"{prefix}.conv{i}.w", he((cout, cin, 3, 3), cin * 9)),
            graph.parameter(f"{prefix}.conv{i}.b", np.zeros(cout)),
        )
    return p


def backbone(obs, p):
    """(in_channels, H, W) observation -> (C, H, W) feature."""
    if obs.data.ndim != 3 or obs.shape[0] != p["in_channels"]:
        raise eg.ShapeError(
            f"backbone: expected ({p['in_channels']},H,W), got {obs.shape}")
    if obs.shape[1] % 8 or obs.shape[2] % 8:
        raise eg.ShapeError(f"backbone: dims {obs.shape[1:]} must be divisible by 8")
    x = obs
    for i in range(3):
        x = eg.relu(eg.conv2d(x, *p[f"conv{i}"]))
    return x


def init_head(graph, rng, c, prefix="head"):
    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    p = {"c": c}
    p["conv"] = (
        graph.parameter(f"{prefix}.conv.w", he((c, c, 3, 3), c * 9)),
        graph.parameter(f"{prefix}.conv.b", np.zeros(c)),
    )
    p["out"] = (
        graph.parameter(f"{prefix}.out.w", he((5, c, 1, 1), c)),
        graph.parameter(f"{prefix}.out.b", np.zeros(5)),
    )
    return p


def head(feature, p):
    """(C, H, W) -> dict with heatmap logits (1,H,W) and regression (4,H,W).

    Regression channels: center offsets (dx, dy in [0,1)) and log sizes.
    """
    x = eg.relu(eg.conv2d(feature, *p["conv"]))
    out = eg.conv2d(x, *p["out"], padding=0)
    hw = out.shape[1] * out.shape[2]
    flat = eg.reshape(out, (5 * hw,))
    logits = eg.reshape(eg.gather(flat, np.arange(hw)), (1,) + out.shape[1:])
    reg = eg.reshape(eg.gather(flat, np.arange(hw, 5 * hw)), (4,) + out.shape[1:])
    return {"logits": logits, "regression": reg}


# ---------------------------------------------------------------------------
# losses (custom differentiable nodes)
# ---------------------------------------------------------------------------

def _bce_with_logits(logits, targets, weights=None):
    """Numerically stable binary cross-entropy against constant targets.

    ``weights`` (constant, same shape) default to 1/n, i.e. a plain mean.
    """
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if weights is None:
        weights = np.full(x.shape, 1.0 / x.size)
    wgt = np.asarray(weights, dtype=np.float64)
    loss = (wgt * (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))).sum()
    sig = 1.0 / (1.0 + np.exp(-np.abs(x)))
    sig = np.where(x >= 0, sig, 1.0 - sig)

    def vjp(g):
        return ((sig - t) * (g * wgt),)

    return eg.Tensor(np.float64(loss), (logits,), vjp, op="bce_with_logits")


def _balanced_heat_weights(heat):
    """Positive and negative cells each carry half the total weight.

    With no positive cells this degrades to the uniform per-cell mean.
    """
    pos = heat > 0
    npos = int(pos.sum())
    if npos == 0:
        return None
    nneg = heat.size - npos
    wgt = np.empty(heat.shape, dtype=np.float64)
    wgt[pos] = 0.5 / npos
    wgt[~pos] = 0.5 / nneg if nneg else 0.0
    return wgt


def _weighted_l1(x, targets, weights):
    """sum(weights * |x - targets|) with constant targets and weights."""
    t = np.asarray(targets, dtype=np.float64)
    wgt = np.asarray(weights, dtype=np.float64)
    diff = x.data - t
    loss = (wgt * np.abs(diff)).sum()

    def vjp(g):
        return (g * wgt * np.sign(diff),)

    return eg.Tensor(np.float64(loss), (x,), vjp, op="weighted_l1")


def rasterize_targets(boxes, h, w):
    """Heatmap + regression targets from ground-truth boxes.

    Returns (heat (1,H,W), reg (4,H,W), reg_weight (4,H,W)); the weight is
    1/(4*npos) at positive cells so the L1 term is a mean over positives.
    """
    heat = np.zeros((1, h, w), dtype=np.float64)
    reg = np.zeros((4, h, w), dtype=np.float64)
    wgt = np.zeros((4, h, w), dtype=np.float64)
    cells = []
    for bx in boxes:
        cx, cy = int(np.floor(bx.cx)), int(np.floor(bx.cy))
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        heat[0, cy, cx] = 1.0
        reg[0, cy, cx] = bx.cx - cx
        reg[1, cy, cx] = bx.cy - cy
        reg[2, cy, cx] = np.log(bx.w)
        reg[3, cy, cx] = np.log(bx.h)
        cells.append((cy, cx))
    if cells:
        per = 1.0 / (4.0 * len(cells))
        for cy, cx in cells:
            wgt[:, cy, cx] = per
    return heat, reg, wgt


def detection_loss(pred, boxes):
    """Mean BCE on the heatmap + mean L1 on regression at positive cells."""
    _, h, w = pred["logits"].shape
    heat, reg, wgt = rasterize_targets(boxes, h, w)
    loss = _bce_with_logits(pred["logits"], heat, _balanced_heat_weights(heat))
    if wgt.any():
        loss = eg.add(loss, eg.scale(_weighted_l1(pred["regression"], reg, wgt),
                                     LAMBDA_REG))
    return loss


def total_loss(pred, boxes, latents, beta):
    """Detection loss plus beta-weighted KL terms (one per sender latent)."""
    from .iae import kl_to_standard_normal

    if beta < 0:
        raise ValueError("beta must be nonnegative")
    loss = detection_loss(pred, boxes)
    if beta > 0:
        for g in latents:
            loss = eg.add(loss, eg.scale(kl_to_standard_normal(g), beta))
    return loss


# ---------------------------------------------------------------------------
# decoding and evaluation
# ---------------------------------------------------------------------------

def nms(boxes, iou_thr=0.5):
    """Greedy score-descending NMS; ties broken by insertion order."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_thr for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def decode_boxes(pred, threshold=0.5, nms_iou=0.5):
    """Local-maximum heatmap cells above threshold -> boxes, then NMS."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    logits = pred["logits"].data[0]
    reg = pred["regression"].data
    ex = np.exp(-np.abs(logits))
    prob = np.where(logits >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    h, w = prob.shape
    padded = np.pad(prob, 1, constant_values=-np.inf)
    neigh = np.stack([padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                      if (dy, dx) != (0, 0)])
    peaks = (prob >= neigh.max(axis=0)) & (prob > threshold)
    boxes = []
    for cy, cx in np.argwhere(peaks):
        boxes.append(Box(cx=cx + float(np.clip(reg[0, cy, cx], 0.0, 1.0 - 1e-9)),
                         cy=cy + float(np.clip(reg[1, cy, cx], 0.0, 1.0 - 1e-9)),
                         w=float(np.exp(np.clip(reg[2, cy, cx], -5, 5))),
                         h=float(np.exp(np.clip(reg[3, cy, cx], -5, 5))),
                         score=float(prob[cy, cx])))
    return nms(boxes, nms_iou)


def average_precision(predictions, ground_truths, iou_thr):
    """All-points interpolated AP with greedy highest-score-first matching.

    ``predictions`` is a list of (group_id, Box); ``ground_truths`` maps
    group_id -> list of Box. Matching is one-to-one within a group.
    """
    n_gt = sum(len(v) for v in ground_truths.values())
    if not predictions:
        return 0.0 if n_gt else 1.0
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i][1].score, i))
    matched = {gid: [False] * len(v) for gid, v in ground_truths.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        gid, box = predictions[i]
        gts = ground_truths.get(gid, [])
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if matched[gid][j]:
                continue
            v = iou(box, gt)
            if v >= iou_thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[gid][best] = True
            tp[rank] = 1.0
    if n_gt == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # all-points interpolation: envelope precision from the right
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = prec_env[0] * recall[0]
    for i in range(1, len(order)):
        ap += prec_env[i] * (recall[i] - recall[i - 1])
    return float(ap)


def mean_average_precision(predictions, ground_truths, thresholds=IOU_THRESHOLDS):
    aps = {t: average_precision(predictions, ground_truths, t) for t in thresholds}
    aps["mean"] = float(np.mean([aps[t] for t in thresholds]))
    return aps
