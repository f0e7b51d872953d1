"""Detection: IoU, losses, target rasterization, NMS, box decoding, AP."""

import numpy as np
import pytest

from ibcomm import detect, engine as eg
from conftest import gradcheck

Box = detect.Box


# ---------------------------------------------------------------------------
# IoU and boxes
# ---------------------------------------------------------------------------

def test_iou_hand_cases():
    a = Box(cx=2, cy=2, w=2, h=2)
    assert detect.iou(a, a) == pytest.approx(1.0, abs=0)
    assert detect.iou(a, Box(cx=10, cy=10, w=2, h=2)) == 0.0
    # unit squares offset by 0.5 in x: intersection 0.5, union 1.5
    assert detect.iou(Box(cx=0, cy=0, w=1, h=1),
                      Box(cx=0.5, cy=0, w=1, h=1)) == pytest.approx(1 / 3)
    # touching edges count as zero overlap
    assert detect.iou(Box(cx=0, cy=0, w=2, h=2), Box(cx=2, cy=0, w=2, h=2)) == 0.0


def test_box_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        Box(cx=0, cy=0, w=0, h=1)
    with pytest.raises(ValueError):
        Box(cx=0, cy=0, w=1, h=-2)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def test_backbone_and_head_shapes(rng):
    g = eg.Graph()
    bp = detect.init_backbone(g, rng, c=4)
    hp = detect.init_head(g, rng, c=4)
    obs = eg.Tensor(rng.standard_normal((2, 16, 16)))
    feat = detect.backbone(obs, bp)
    assert feat.shape == (4, 16, 16)
    pred = detect.head(feat, hp)
    assert pred["logits"].shape == (1, 16, 16)
    assert pred["regression"].shape == (4, 16, 16)
    with pytest.raises(eg.ShapeError):
        detect.backbone(eg.Tensor(rng.standard_normal((3, 16, 16))), bp)
    with pytest.raises(eg.ShapeError):
        detect.backbone(eg.Tensor(rng.standard_normal((2, 12, 16))), bp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_bce_matches_direct_formula(rng):
    logits = rng.standard_normal((1, 4, 4)) * 2
    targets = (rng.random((1, 4, 4)) > 0.5).astype(np.float64)
    got = float(detect._bce_with_logits(eg.Tensor(logits.copy()), targets).data)
    p = 1 / (1 + np.exp(-logits))
    want = -(targets * np.log(p) + (1 - targets) * np.log(1 - p)).mean()
    assert got == pytest.approx(want, rel=1e-12)


def test_bce_all_zero_logits_is_log_two():
    logits = eg.Tensor(np.zeros((1, 3, 3)))
    loss = detect._bce_with_logits(logits, np.zeros((1, 3, 3)))
    assert float(loss.data) == pytest.approx(np.log(2.0), rel=1e-12)


def test_balanced_weights_split_mass_evenly():
    heat = np.zeros((1, 4, 4))
    heat[0, 1, 2] = 1.0
    heat[0, 3, 0] = 1.0
    w = detect._balanced_heat_weights(heat)
    assert w[heat > 0].sum() == pytest.approx(0.5)
    assert w[heat == 0].sum() == pytest.approx(0.5)
    assert detect._balanced_heat_weights(np.zeros((1, 4, 4))) is None


def test_rasterize_targets(rng):
    boxes = [Box(cx=2.5, cy=1.5, w=3, h=3), Box(cx=100, cy=100, w=1, h=1)]
    heat, reg, wgt = detect.rasterize_targets(boxes, 8, 8)
    assert heat.sum() == 1.0 and heat[0, 1, 2] == 1.0  # off-grid box skipped
    assert reg[0, 1, 2] == 0.5 and reg[1, 1, 2] == 0.5
    assert reg[2, 1, 2] == pytest.approx(np.log(3))
    assert wgt[:, 1, 2].sum() == pytest.approx(1.0)


def test_detection_loss_gradient(rng):
    boxes = [Box(cx=2.5, cy=2.5, w=3, h=3)]
    logits = rng.standard_normal(64)
    regs = rng.standard_normal(256) * 0.3 + 0.01  # keep |x - t| off zero

    def build(t):
        pred = {"logits": eg.reshape(t[0], (1, 8, 8)),
                "regression": eg.reshape(t[1], (4, 8, 8))}
        return detect.detection_loss(pred, boxes)

    gradcheck(build, [logits, regs], rtol=1e-6)


def test_total_loss_adds_beta_weighted_kl(rng):
    from ibcomm import iae
    boxes = [Box(cx=1.5, cy=1.5, w=1, h=1)]
    pred = {"logits": eg.Tensor(rng.standard_normal((1, 8, 8))),
            "regression": eg.Tensor(rng.standard_normal((4, 8, 8)))}
    lat = iae.GaussianLatent(mu=eg.Tensor(rng.standard_normal(4)),
                             sigma=eg.Tensor(np.abs(rng.standard_normal(4)) + 0.3))
    base = float(detect.total_loss(pred, boxes, [lat], beta=0.0).data)
    kl = float(iae.kl_to_standard_normal(lat).data)
    got = float(detect.total_loss(pred, boxes, [lat], beta=0.25).data)
    assert got == pytest.approx(base + 0.25 * kl, rel=1e-12)
    with pytest.raises(ValueError):
        detect.total_loss(pred, boxes, [lat], beta=-1.0)


# ---------------------------------------------------------------------------
# NMS and decoding
# ---------------------------------------------------------------------------

def nms_oracle(boxes, iou_thr):
    """Quadratic reference NMS, highest score first, insertion-order ties."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        if all(detect.iou(boxes[i], boxes[j]) <= iou_thr for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def test_nms_matches_oracle(rng):
    for _ in range(30):
        boxes = [Box(cx=float(rng.integers(0, 10)) + 0.5,
                     cy=float(rng.integers(0, 10)) + 0.5,
                     w=float(rng.integers(1, 4)), h=float(rng.integers(1, 4)),
                     score=float(np.round(rng.random(), 2)))
                 for _ in range(12)]
        assert detect.nms(boxes, 0.4) == nms_oracle(boxes, 0.4)


def test_nms_suppresses_duplicates():
    a = Box(cx=2, cy=2, w=2, h=2, score=0.9)
    b = Box(cx=2, cy=2, w=2, h=2, score=0.5)
    c = Box(cx=8, cy=8, w=2, h=2, score=0.7)
    assert detect.nms([a, b, c], 0.5) == [a, c]


def test_decode_boxes_single_peak():
    logits = np.full((1, 8, 8), -8.0)
    logits[0, 3, 5] = 6.0
    reg = np.zeros((4, 8, 8))
    reg[0, 3, 5] = 0.5
    reg[1, 3, 5] = 0.5
    reg[2, 3, 5] = np.log(3.0)
    reg[3, 3, 5] = np.log(2.0)
    pred = {"logits": eg.Tensor(logits), "regression": eg.Tensor(reg)}
    out = detect.decode_boxes(pred, threshold=0.5)
    assert len(out) == 1
    bx = out[0]
    assert (bx.cx, bx.cy) == (5.5, 3.5)
    assert bx.w == pytest.approx(3.0) and bx.h == pytest.approx(2.0)
    assert bx.score == pytest.approx(1 / (1 + np.exp(-6.0)))
    with pytest.raises(ValueError):
        detect.decode_boxes(pred, threshold=1.5)


def test_decode_boxes_requires_local_maximum():
    logits = np.full((1, 8, 8), -8.0)
    logits[0, 4, 4] = 5.0
    logits[0, 4, 5] = 4.0  # adjacent but weaker: not a peak
    pred = {"logits": eg.Tensor(logits), "regression": eg.Tensor(np.zeros((4, 8, 8)))}
    out = detect.decode_boxes(pred, threshold=0.5, nms_iou=0.01)
    assert len(out) == 1


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def test_ap_trivial_cases():
    gt = {0: [Box(cx=1, cy=1, w=2, h=2)]}
    perfect = [(0, Box(cx=1, cy=1, w=2, h=2, score=0.9))]
    assert detect.average_precision(perfect, gt, 0.5) == 1.0
    assert detect.average_precision([], gt, 0.5) == 0.0
    assert detect.average_precision([], {0: []}, 0.5) == 1.0


def test_ap_hand_computed_staircase():
    # 2 ground truths; ranked predictions: TP, FP, TP
    gt = {0: [Box(cx=1, cy=1, w=2, h=2), Box(cx=8, cy=8, w=2, h=2)]}
    preds = [(0, Box(cx=1, cy=1, w=2, h=2, score=0.9)),
             (0, Box(cx=4, cy=4, w=2, h=2, score=0.8)),
             (0, Box(cx=8, cy=8, w=2, h=2, score=0.7))]
    # precision envelope: [1, 2/3, 2/3]; AP = 1*0.5 + (2/3)*0.5
    assert detect.average_precision(preds, gt, 0.5) == pytest.approx(0.5 + 1 / 3)


def test_ap_double_detection_counts_one_tp():
    gt = {0: [Box(cx=1, cy=1, w=2, h=2)]}
    preds = [(0, Box(cx=1, cy=1, w=2, h=2, score=0.9)),
             (0, Box(cx=1, cy=1, w=2, h=2, score=0.8))]
    assert detect.average_precision(preds, gt, 0.5) == 1.0  # second is FP after recall 1


def test_ap_groups_are_isolated():
    gt = {0: [Box(cx=1, cy=1, w=2, h=2)], 1: [Box(cx=1, cy=1, w=2, h=2)]}
    preds = [(0, Box(cx=1, cy=1, w=2, h=2, score=0.9))]  # right box, group 0 only
    assert detect.average_precision(preds, gt, 0.5) == pytest.approx(0.5)


def test_ap_matches_best_iou_not_first(rng):
    tight = Box(cx=1.0, cy=1.0, w=2, h=2)
    loose = Box(cx=1.6, cy=1.0, w=2, h=2)
    gt = {0: [loose, tight]}
    preds = [(0, Box(cx=1.0, cy=1.0, w=2, h=2, score=0.9)),
             (0, Box(cx=1.6, cy=1.0, w=2, h=2, score=0.8))]
    assert detect.average_precision(preds, gt, 0.5) == 1.0


def test_mean_average_precision_keys(rng):
    gt = {0: [Box(cx=1, cy=1, w=2, h=2)]}
    preds = [(0, Box(cx=1.2, cy=1, w=2, h=2, score=0.9))]
    aps = detect.mean_average_precision(preds, gt)
    assert set(aps) == {0.3, 0.5, 0.7, "mean"}
    assert aps["mean"] == pytest.approx(np.mean([aps[0.3], aps[0.5], aps[0.7]]))
    assert aps[0.3] >= aps[0.5] >= aps[0.7]
