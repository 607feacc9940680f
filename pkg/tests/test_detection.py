import math

import numpy as np
import pytest

from helpers import numeric_grad, rel_error
from weakseg.boxes import iou_matrix, nms
from weakseg.data import gen_synthetic
from weakseg.detection import (BBOX_STD, DetectionModule, DetectionSettings, SkipImage, dense_calibration,
                               detect_infer, detections_from_json, detections_to_json, filter_pseudo,
                               keep_for_labels, make_anchors, match_anchors, rcnn_loss, rpn_loss, sample_rois)
from weakseg.nn import backbone_net, make_rng


def sl1(x):
    return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5


# ---------------------------------------------------------------- anchors and matching

def test_anchor_grid_layout():
    a = make_anchors(2, 3, 4)
    assert a.shape == (2 * 3 * 9, 4)
    first = a[:9]
    assert np.allclose((first[:, :2] + first[:, 2:]) / 2, [2, 2])
    areas = (first[:, 2] - first[:, 0]) * (first[:, 3] - first[:, 1])
    assert np.allclose(areas, np.repeat([64.0, 256.0, 1024.0], 3))
    assert np.allclose((a[9, :2] + a[9, 2:]) / 2, [6, 2])


def test_anchor_equal_to_pseudo_box_is_positive_with_zero_target():
    anchors = make_anchors(4, 4, 4)
    box = anchors[40]
    m = match_anchors(anchors, box[None], [0.7], make_rng(0))
    assert m.labels[40] == 1 and np.allclose(m.targets[40], 0) and m.weights[40] == 0.7


def test_disjoint_anchor_negative_and_empty_skips():
    anchors = np.array([[0, 0, 8, 8], [40, 40, 60, 60]], dtype=float)
    m = match_anchors(anchors, np.array([[40, 40, 60, 60]]), [1.0], make_rng(0))
    assert m.labels[0] == 0 and m.labels[1] == 1
    with pytest.raises(SkipImage):
        match_anchors(anchors, np.zeros((0, 4)), [], make_rng(0))


def test_match_labels_equal_bruteforce_oracle():
    rng = make_rng(1)
    s = DetectionSettings()
    anchors = make_anchors(8, 8, 4)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        xy = rng.uniform(0, 40, (n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(6, 24, (n, 2))], axis=1)
        m = match_anchors(anchors, boxes, np.ones(n), rng, s)
        ref = np.full(len(anchors), -1)
        for i, a in enumerate(anchors):
            best = max(iou_matrix(a, b)[0, 0] for b in boxes)
            if best <= s.rpn_neg_iou:
                ref[i] = 0
            if best >= s.rpn_pos_iou:
                ref[i] = 1
        for b in boxes:
            ov = [iou_matrix(a, b)[0, 0] for a in anchors]
            ref[int(np.argmax(ov))] = 1
        assert np.array_equal(m.labels, ref)
        assert len(m.sampled) == min(64, (ref >= 0).sum())
        assert len(np.unique(m.sampled)) == len(m.sampled)


# ---------------------------------------------------------------- losses

def bce(z, y):
    p = 1 / (1 + math.exp(-z))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_rpn_loss_hand_case():
    z = np.array([0.4, -1.2])
    t = np.array([[0.1, -0.2, 1.5, 0.3], [0.0, 0.5, -0.1, 0.2]])
    tt = np.array([[0.0, 0.0, 0.2, 0.1], [0.3, 0.3, 0.3, 0.3]])
    labels = np.array([1, 1])
    w = np.array([0.5, 0.25])
    loss, *_ = rpn_loss(z, t, labels, tt, w, lam=1.0)
    hand = (bce(0.4, 1) + bce(-1.2, 1)) / 2
    hand += (0.5 * (0.005 + 0.02 + 0.8 + 0.02) + 0.25 * (0.045 + 0.02 + 0.08 + 0.005)) / 2
    assert abs(loss - hand) < 1e-12


def unweighted_rpn(z, t, labels, tt):
    n = len(z)
    obj = sum(bce(zi, yi) for zi, yi in zip(z, labels)) / n
    reg = sum(sum(sl1(a - b) for a, b in zip(t[i], tt[i])) for i in range(n) if labels[i] == 1) / n
    return obj + reg


def unweighted_fast_rcnn(logits, offsets, labels, targets):
    n = len(logits)
    total = 0.0
    for i in range(n):
        lse = math.log(sum(math.exp(v) for v in logits[i]))
        total += lse - logits[i, labels[i]]
        if labels[i] > 0:
            c = labels[i] - 1
            total += sum(sl1(offsets[i, 4 * c + k] - targets[i, k]) for k in range(4))
    return total / n


def random_rpn_case(rng, n=8):
    return (rng.standard_normal(n), rng.standard_normal((n, 4)) * 0.8, rng.integers(0, 2, n),
            rng.standard_normal((n, 4)) * 0.8, rng.random(n))


def random_rcnn_case(rng, n=6, c=3):
    return (rng.standard_normal((n, c + 1)), rng.standard_normal((n, 4 * c)) * 0.8, rng.integers(0, c + 1, n),
            rng.standard_normal((n, 4)) * 0.8, rng.random(n))


def test_unit_weights_reduce_to_unweighted_references():
    rng = make_rng(2)
    for _ in range(20):
        z, t, y, tt, _ = random_rpn_case(rng)
        assert abs(rpn_loss(z, t, y, tt, np.ones(len(z)))[0] - unweighted_rpn(z, t, y, tt)) <= 1e-12
        lg, off, lab, tgt, _ = random_rcnn_case(rng)
        assert abs(rcnn_loss(lg, off, lab, tgt, np.ones(len(lg)))[0] - unweighted_fast_rcnn(lg, off, lab, tgt)) <= 1e-12


def test_zero_weights_zero_regression_and_alpha_scaling():
    rng = make_rng(3)
    z, t, y, tt, w = random_rpn_case(rng)
    assert rpn_loss(z, t, y, tt, np.zeros(len(z)))[3][1] == 0.0
    lg, off, lab, tgt, w2 = random_rcnn_case(rng)
    for alpha in (0.5, 2.0, 3.7):
        a = rpn_loss(z, t, y, tt, w)[3][1]
        b = rpn_loss(z, t, y, tt, alpha * w)[3][1]
        assert abs(b - alpha * a) <= 1e-12 * abs(alpha * a)
        a_cls, a_reg = rcnn_loss(lg, off, lab, tgt, w2)[3]
        b_cls, b_reg = rcnn_loss(lg, off, lab, tgt, alpha * w2)[3]
        assert abs(b_cls - alpha * a_cls) <= 1e-12 * abs(alpha * a_cls)
        assert abs(b_reg - alpha * a_reg) <= 1e-12 * abs(alpha * a_reg)


def test_rcnn_background_has_no_regression_and_mixed_hand_case():
    lg = np.array([[2.0, 0.1, -0.3, 0.0], [0.2, 1.1, 0.4, -0.5]])
    off = np.array([[9.0] * 12, [0.1, 0.2, 0.3, 0.4, 1.5, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
    tgt = np.array([[0.0] * 4, [0.0, 0.0, 0.0, 0.0]])
    lab = np.array([0, 2])
    w = np.array([1.0, 0.4])
    loss, _, doff, (l_cls, l_reg) = rcnn_loss(lg, off, lab, tgt, w)
    assert np.all(doff[0] == 0)
    ce0 = math.log(sum(math.exp(v) for v in lg[0])) - lg[0, 0]
    ce1 = math.log(sum(math.exp(v) for v in lg[1])) - lg[1, 2]
    reg1 = sl1(1.5) + sl1(-2.0) + sl1(0.0) + sl1(0.0)
    assert abs(l_cls - (1.0 * ce0 + 0.4 * ce1) / 2) < 1e-12
    assert abs(l_reg - 0.4 * reg1 / 2) < 1e-12
    assert abs(loss - l_cls - l_reg) < 1e-15


def test_loss_gradients_vs_finite_differences():
    rng = make_rng(4)
    for _ in range(20):
        z, t, y, tt, w = random_rpn_case(rng)
        _, dz, dt, _ = rpn_loss(z, t, y, tt, w)
        assert rel_error(dz, numeric_grad(lambda: rpn_loss(z, t, y, tt, w)[0], z)) < 1e-5
        assert rel_error(dt, numeric_grad(lambda: rpn_loss(z, t, y, tt, w)[0], t)) < 1e-5
        lg, off, lab, tgt, w2 = random_rcnn_case(rng)
        _, dl, do, _ = rcnn_loss(lg, off, lab, tgt, w2)
        assert rel_error(dl, numeric_grad(lambda: rcnn_loss(lg, off, lab, tgt, w2)[0], lg)) < 1e-5
        assert rel_error(do, numeric_grad(lambda: rcnn_loss(lg, off, lab, tgt, w2)[0], off)) < 1e-5


def test_sample_rois_thresholds():
    rng = make_rng(5)
    boxes = np.array([[10, 10, 30, 30]], dtype=float)
    xy = rng.uniform(0, 40, (200, 2))
    cand = np.concatenate([xy, xy + rng.uniform(5, 30, (200, 2))], axis=1)
    cand = np.vstack([cand, boxes])
    rois, labels, w, targets, matched = sample_rois(cand, boxes, [2], [0.6], rng)
    ov = iou_matrix(rois, boxes)[:, 0]
    assert np.all(ov[labels > 0] >= 0.5) and np.all(labels[labels > 0] == 2)
    assert np.all((ov[labels == 0] < 0.5) & (ov[labels == 0] >= 0.1))
    assert np.all(w[labels > 0] == 0.6) and np.all(w[labels == 0] == 1.0)
    assert np.all(matched[labels == 0] == -1)
    assert np.all(targets[labels == 0] == 0)
    exact = np.nonzero(np.all(rois == boxes[0], axis=1))[0]
    if len(exact):
        assert np.allclose(targets[exact[0]] * BBOX_STD, 0)


# ---------------------------------------------------------------- inference and dense calibration

@pytest.fixture(scope="module")
def det_setup():
    rng = make_rng(6)
    s = gen_synthetic(1, 9)[0]
    feat = backbone_net(rng)(s.image[None])
    return s, feat, DetectionModule(3, rng)


def test_untrained_inference_invariants(det_setup):
    s, feat, mod = det_setup
    dets = detect_infer(mod, feat)
    assert len(dets) > 0
    scores = [d[2] for d in dets]
    assert scores == sorted(scores, reverse=True)
    for c, b, sc in dets:
        assert 0 <= b[0] < b[2] <= 64 and 0 <= b[1] < b[3] <= 64 and sc >= 0.05
    for c in {d[0] for d in dets}:
        bx = np.array([d[1] for d in dets if d[0] == c])
        m = iou_matrix(bx, bx)
        np.fill_diagonal(m, 0)
        assert m.max(initial=0) <= 0.5


def test_training_step_gradients_flow(det_setup):
    s, feat, mod = det_setup
    mod.zero_grad()
    boxes = np.array([g.box for g in s.instances])
    loss, dfeat, parts = mod.loss_and_backward(feat, (boxes, [g.cls for g in s.instances], np.ones(len(boxes))),
                                               make_rng(7))
    assert np.isfinite(loss) and dfeat.shape == feat.shape
    assert set(parts) == {"rpn_obj", "rpn_reg", "rcnn_cls", "rcnn_reg"}
    assert any(np.any(g != 0) for _, _, grads, k in mod.named_params() for g in [grads[k]])


def test_dense_calibration_instance_counts(det_setup):
    s, feat, mod = det_setup
    one = dense_calibration(mod, feat, s.image, [(1, np.array([5.0, 5, 25, 25]), 0.8)])
    assert len(one) == 1 and one[0].cls == 1 and one[0].weight == 0.8
    far = dense_calibration(mod, feat, s.image, [(2, np.array([2.0, 2, 18, 18]), 0.9),
                                                 (2, np.array([40.0, 40, 60, 62]), 0.7)])
    assert [h.cls for h in far] == [2, 2]
    raw = np.array([[10, 10, 30, 30], [11, 10, 31, 30], [12, 12, 30, 32], [40, 5, 60, 25]], dtype=float)
    sc = np.array([0.9, 0.8, 0.7, 0.6])
    kept, _ = nms(raw, sc, 0.5)
    out = dense_calibration(mod, feat, s.image, [(3, raw[k], float(sc[k])) for k in kept])
    assert len(out) == len(kept) == 2
    assert dense_calibration(mod, feat, s.image, []) == []


def test_label_filter_and_json_roundtrip():
    dets = [(1, np.array([0.0, 0, 5, 5]), 0.1), (1, np.array([1.0, 1, 6, 6]), 0.05), (2, np.array([0.0, 0, 9, 9]), 0.9),
            (3, np.array([2.0, 2, 9, 9]), 0.3)]
    assert keep_for_labels([1, 1, 2, 3], [0.1, 0.05, 0.9, 0.3], [1, 0, 1], 0.2) == [0, 3]
    assert [d[0] for d in filter_pseudo(dets, [1, 1, 0])] == [1, 2]
    assert keep_for_labels([1, 1, 1, 1, 2], [0.3, 0.9, 0.5, 0.7, 0.1], [1, 1, 0], 0.2, 2) == [1, 3, 4]
    assert keep_for_labels([1, 1, 1, 1], [0.3, 0.9, 0.5, 0.7], [1, 0, 0], 0.2, 0) == [0, 1, 2, 3]
    back = detections_from_json(detections_to_json(dets))
    assert all(a[0] == b[0] and np.array_equal(a[1], b[1]) and a[2] == b[2] for a, b in zip(dets, back))
