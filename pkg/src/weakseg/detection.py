"""Anchor RPN plus an RCNN head trained on weighted pseudo boxes, and dense calibration of its detections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import as_boxes, clip_boxes, decode_box, encode_box, iou_matrix, nms
from .calibration import (CalibrationSettings, InstanceHypothesis, background_map, build_instance_attention,
                          crop_region, fuse_and_segment, object_heatmap, proposal_attention)
from .nn import Conv2d, Flatten, Linear, Module, Network, ReLU, RoiPool, head_block, log_softmax, sigmoid, softmax

BBOX_STD = np.array([0.1, 0.1, 0.2, 0.2])


class SkipImage(Exception):
    """Raised when an image has no pseudo boxes to learn from."""


@dataclass
class DetectionSettings:
    anchor_scales: tuple = (8.0, 16.0, 32.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 4
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_positives: int = 32
    rpn_negatives: int = 32
    rpn_pre_nms: int = 600
    rpn_nms: float = 0.7
    rpn_post_nms: int = 100
    rpn_min_size: float = 2.0
    fg_iou: float = 0.5
    bg_iou_lo: float = 0.1
    rois_per_image: int = 32
    fg_rois: int = 16
    mask_rois: int = 8
    det_nms: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    lam: float = 1.0


@dataclass
class MatchResult:
    labels: np.ndarray      # (A,) 1 positive, 0 negative, -1 ignore
    matched: np.ndarray     # (A,) pseudo-instance index (meaningful for positives)
    targets: np.ndarray     # (A, 4) encoded offsets t*
    weights: np.ndarray     # (A,) inherited w* (0 for non-positives)
    sampled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def make_anchors(feat_h, feat_w, stride=4, scales=(8.0, 16.0, 32.0), ratios=(0.5, 1.0, 2.0)):
    """(feat_h * feat_w * k, 4) anchors ordered by row, column, then scale-major anchor slot."""
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s / np.sqrt(r), s * np.sqrt(r)))
    wh = np.array(shapes)
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    cy, cx = np.meshgrid(cy, cx, indexing="ij")
    c = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
    half = wh[None] / 2
    return np.concatenate([c - half, c + half], axis=-1).reshape(-1, 4)


def match_anchors(anchors, boxes, weights, rng, settings=DetectionSettings()):
    """Label anchors against pseudo boxes and draw a fixed-size positive/negative sample."""
    boxes = as_boxes(boxes)
    if len(boxes) == 0:
        raise SkipImage("no pseudo boxes")
    anchors = as_boxes(anchors)
    ov = iou_matrix(anchors, boxes)
    best = ov.argmax(axis=1)
    best_ov = ov[np.arange(len(anchors)), best]
    labels = np.full(len(anchors), -1)
    labels[best_ov <= settings.rpn_neg_iou] = 0
    labels[best_ov >= settings.rpn_pos_iou] = 1
    matched = best.copy()
    for g in range(len(boxes)):
        a = int(ov[:, g].argmax())
        labels[a] = 1
        matched[a] = g
    pos = labels == 1
    targets = np.zeros((len(anchors), 4))
    targets[pos] = encode_box(anchors[pos], boxes[matched[pos]])
    w = np.where(pos, np.asarray(weights, dtype=np.float64)[matched], 0.0)

    pos_idx = np.nonzero(pos)[0]
    neg_idx = np.nonzero(labels == 0)[0]
    total = settings.rpn_positives + settings.rpn_negatives
    n_pos = min(settings.rpn_positives, len(pos_idx))
    n_neg = min(total - n_pos, len(neg_idx))
    n_pos = min(total - n_neg, len(pos_idx))
    take_pos = rng.choice(pos_idx, n_pos, replace=False) if n_pos else pos_idx[:0]
    take_neg = rng.choice(neg_idx, n_neg, replace=False) if n_neg else neg_idx[:0]
    sampled = np.sort(np.concatenate([take_pos, take_neg]).astype(int))
    return MatchResult(labels, matched, targets, w, sampled)


def smooth_l1(x):
    """Elementwise smooth-L1 and its derivative."""
    a = np.abs(x)
    quad = a < 1.0
    return np.where(quad, 0.5 * x * x, a - 0.5), np.where(quad, x, np.sign(x))


def rpn_loss(obj_logits, offsets, labels, targets, weights, lam=1.0):
    """Objectness BCE on binary labels plus w*-weighted smooth-L1 on positives, both over N sampled anchors.

    Returns (loss, d_logits, d_offsets, (objectness term, regression term)).
    """
    z = np.asarray(obj_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = max(len(z), 1)
    # log(1 + exp(-|z|)) form keeps the BCE finite for any logit
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    l_obj = float(bce.sum() / n)
    dz = (sigmoid(z) - y) / n
    pos = (y > 0).astype(np.float64) * np.asarray(weights, dtype=np.float64)
    sl, dsl = smooth_l1(np.asarray(offsets, dtype=np.float64) - targets)
    l_reg = float(lam * (pos[:, None] * sl).sum() / n)
    dt = lam * pos[:, None] * dsl / n
    return l_obj + l_reg, dz, dt, (l_obj, l_reg)


def rcnn_loss(logits, offsets, labels, targets, weights, lam=1.0):
    """w*-weighted softmax CE over C+1 plus w*-weighted smooth-L1 on foreground rois.

    ``offsets`` is (N, 4C) with one 4-block per foreground class; ``targets``
    (N, 4) holds the already normalized t* for foreground rows.
    Returns (loss, d_logits, d_offsets, (classification term, regression term)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    w = np.asarray(weights, dtype=np.float64)
    n = max(len(logits), 1)
    rows = np.arange(len(logits))
    lsm = log_softmax(logits, axis=1)
    l_cls = float(-(w * lsm[rows, labels]).sum() / n)
    dlog = np.exp(lsm)
    dlog[rows, labels] -= 1.0
    dlog *= w[:, None] / n
    doff = np.zeros_like(offsets, dtype=np.float64)
    fg = np.nonzero(labels > 0)[0]
    l_reg = 0.0
    if len(fg):
        cols = (labels[fg] - 1)[:, None] * 4 + np.arange(4)[None, :]
        sl, dsl = smooth_l1(offsets[fg[:, None], cols] - targets[fg])
        l_reg = float(lam * (w[fg, None] * sl).sum() / n)
        doff[fg[:, None], cols] = lam * w[fg, None] * dsl / n
    return l_cls + l_reg, dlog, doff, (l_cls, l_reg)


def sample_rois(candidates, boxes, classes, weights, rng, settings=DetectionSettings()):
    """Foreground (IoU >= fg_iou) and background ([bg_lo, fg_iou)) rois with labels, w* and normalized t*.

    Returns (rois, labels, weights, targets, matched).
    """
    cand = as_boxes(candidates)
    boxes = as_boxes(boxes)
    ov = iou_matrix(cand, boxes)
    best = ov.argmax(axis=1)
    best_ov = ov[np.arange(len(cand)), best]
    fg_idx = np.nonzero(best_ov >= settings.fg_iou)[0]
    bg_idx = np.nonzero((best_ov < settings.fg_iou) & (best_ov >= settings.bg_iou_lo))[0]
    if len(bg_idx) == 0:
        bg_idx = np.nonzero(best_ov < settings.fg_iou)[0]
    n_fg = min(settings.fg_rois, len(fg_idx))
    n_bg = min(settings.rois_per_image - n_fg, len(bg_idx))
    take_fg = rng.choice(fg_idx, n_fg, replace=False) if n_fg else fg_idx[:0]
    take_bg = rng.choice(bg_idx, n_bg, replace=False) if n_bg else bg_idx[:0]
    idx = np.concatenate([np.sort(take_fg), np.sort(take_bg)]).astype(int)
    rois = cand[idx]
    is_fg = np.arange(len(idx)) < n_fg
    matched = np.where(is_fg, best[idx], -1)
    labels = np.where(is_fg, np.asarray(classes, dtype=int)[best[idx]], 0)
    w = np.where(is_fg, np.asarray(weights, dtype=np.float64)[best[idx]], 1.0)
    targets = np.zeros((len(idx), 4))
    if n_fg:
        targets[:n_fg] = encode_box(rois[:n_fg], boxes[best[idx[:n_fg]]]) / BBOX_STD
    return rois, labels, w, targets, matched


def _dedupe(boxes):
    boxes = as_boxes(boxes)
    _, first = np.unique(boxes, axis=0, return_index=True)
    return boxes[np.sort(first)]


class DetectionModule(Module):
    """Head block, RPN (3x3 conv then 1x1 objectness / offsets) and a roi-pool fc head."""

    def __init__(self, num_classes, rng, in_ch=64, width=32, fc_dim=256, pool=7, name="det", settings=None):
        self.num_classes = num_classes
        self.settings = settings or DetectionSettings()
        s = self.settings
        self.k = len(s.anchor_scales) * len(s.anchor_ratios)
        self.head = head_block(in_ch, width, f"{name}.head", rng)
        self.rpn_conv = Network([Conv2d(width, width, 3, rng=rng, pad_mode="edge"), ReLU()], f"{name}.rpn")
        self.rpn_obj = Network([Conv2d(width, self.k, 1, rng=rng, init_std=0.01)], f"{name}.rpn_obj")
        self.rpn_reg = Network([Conv2d(width, 4 * self.k, 1, rng=rng, init_std=0.01)], f"{name}.rpn_reg")
        self.trunk = Network([
            RoiPool(pool, pool, s.stride), Flatten(),
            Linear(width * pool * pool, fc_dim, rng=rng), ReLU(),
            Linear(fc_dim, fc_dim, rng=rng), ReLU(),
        ], f"{name}.trunk")
        self.cls_branch = Network([Linear(fc_dim, num_classes + 1, rng=rng, init_std=0.01)], f"{name}.cls")
        self.bbox_branch = Network([Linear(fc_dim, 4 * num_classes, rng=rng, init_std=0.01)], f"{name}.bbox")
        self._anchor_cache = {}

    # ---- forward pieces ----
    def anchors(self, feat_h, feat_w):
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            s = self.settings
            a = make_anchors(feat_h, feat_w, s.stride, s.anchor_scales, s.anchor_ratios)
            self._anchor_cache[key] = clip_boxes(a, feat_w * s.stride, feat_h * s.stride)
        return self._anchor_cache[key]

    def rpn_forward(self, h):
        r = self.rpn_conv(h)
        obj = self.rpn_obj(r)[0].transpose(1, 2, 0).reshape(-1)
        reg = self.rpn_reg(r)[0].transpose(1, 2, 0).reshape(-1, 4)
        return obj, reg

    def rpn_backward(self, d_obj, d_reg, shape):
        _, _, fh, fw = shape
        g_obj = d_obj.reshape(fh, fw, self.k).transpose(2, 0, 1)[None]
        g_reg = d_reg.reshape(fh, fw, 4 * self.k).transpose(2, 0, 1)[None]
        dr = self.rpn_obj.backward(g_obj) + self.rpn_reg.backward(g_reg)
        return self.rpn_conv.backward(dr)

    def propose(self, obj, reg, feat_h, feat_w, post_nms=None):
        """Decode, clip, filter and NMS the RPN output into (boxes, objectness)."""
        s = self.settings
        anchors = self.anchors(feat_h, feat_w)
        height, width = feat_h * s.stride, feat_w * s.stride
        boxes = clip_boxes(decode_box(anchors, reg), width, height)
        keep = ((boxes[:, 2] - boxes[:, 0]) >= s.rpn_min_size) & ((boxes[:, 3] - boxes[:, 1]) >= s.rpn_min_size)
        idx = np.nonzero(keep)[0]
        order = idx[np.argsort(-obj[idx], kind="stable")][:s.rpn_pre_nms]
        kept, _ = nms(boxes[order], obj[order], s.rpn_nms)
        sel = order[kept][:post_nms or s.rpn_post_nms]
        return boxes[sel], sigmoid(obj[sel])

    def roi_forward(self, h, rois):
        z = self.trunk(h, rois)
        return self.cls_branch(z), self.bbox_branch(z)

    def roi_backward(self, d_logits, d_offsets):
        dz = self.cls_branch.backward(d_logits) + self.bbox_branch.backward(d_offsets)
        return self.trunk.backward(dz)

    # ---- training ----
    def _losses(self, feat, pseudo, rng, extra_rois=()):
        boxes, classes, weights = pseudo[:3]
        h = self.head(feat)
        _, _, fh, fw = h.shape
        s = self.settings
        obj, reg = self.rpn_forward(h)
        match = match_anchors(self.anchors(fh, fw), boxes, weights, rng, s)
        sm = match.sampled
        l_rpn, d_obj_s, d_reg_s, (l_obj, l_rreg) = rpn_loss(
            obj[sm], reg[sm], match.labels[sm], match.targets[sm], match.weights[sm], s.lam)
        d_obj = np.zeros_like(obj)
        d_reg = np.zeros_like(reg)
        d_obj[sm] = d_obj_s
        d_reg[sm] = d_reg_s
        dh = self.rpn_backward(d_obj, d_reg, h.shape)

        props, _ = self.propose(obj, reg, fh, fw)
        cand = _dedupe(np.vstack([props, as_boxes(boxes)] + [as_boxes(e) for e in extra_rois if len(e)]))
        sample = sample_rois(cand, boxes, classes, weights, rng, s)
        rois, labels, w, targets, _ = sample
        logits, offsets = self.roi_forward(h, rois)
        l_rcnn, d_log, d_off, (l_cls, l_reg) = rcnn_loss(logits, offsets, labels, targets, w, s.lam)
        dh = dh + self.roi_backward(d_log, d_off)
        parts = {"rpn_obj": l_obj, "rpn_reg": l_rreg, "rcnn_cls": l_cls, "rcnn_reg": l_reg}
        return l_rpn + l_rcnn, dh, parts, h, sample

    def loss_and_backward(self, feat, pseudo, rng, extra_rois=()):
        """RPN + RCNN losses for one image against ``pseudo`` = (boxes, classes, weights[, masks]).

        Returns (loss, dfeat, parts) where parts maps each loss term to its value.
        """
        loss, dh, parts, _, _ = self._losses(feat, pseudo, rng, extra_rois)
        return loss, self.head.backward(dh), parts

    # ---- inference ----
    def score_rois(self, h, rois):
        """Class probabilities (R, C+1) and per-class decoded boxes (R, C, 4) for ``rois``."""
        logits, offsets = self.roi_forward(h, rois)
        prob = softmax(logits, axis=1)
        _, _, fh, fw = h.shape
        s = self.settings
        deltas = offsets.reshape(len(rois), self.num_classes, 4) * BBOX_STD
        dec = decode_box(np.repeat(as_boxes(rois), self.num_classes, axis=0), deltas.reshape(-1, 4))
        dec = clip_boxes(dec, fw * s.stride, fh * s.stride).reshape(len(rois), self.num_classes, 4)
        return prob, dec

    def infer(self, feat):
        """Returns (detections, rois, prob) where detections are (cls, box, score) sorted by score."""
        s = self.settings
        h = self.head(feat)
        _, _, fh, fw = h.shape
        obj, reg = self.rpn_forward(h)
        rois, _ = self.propose(obj, reg, fh, fw)
        prob, dec = self.score_rois(h, rois)
        dets = []
        for c in range(1, self.num_classes + 1):
            sc = prob[:, c]
            bx = dec[:, c - 1]
            ok = (sc >= s.score_threshold) & (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
            idx = np.nonzero(ok)[0]
            if len(idx) == 0:
                continue
            kept, _ = nms(bx[idx], sc[idx], s.det_nms)
            dets += [(c, bx[idx[k]], float(sc[idx[k]])) for k in kept]
        dets.sort(key=lambda d: -d[2])
        return dets[:s.max_detections], rois, prob


def detect_infer(module, feat):
    return module.infer(feat)[0]


def keep_for_labels(classes, scores, labels, min_score=0.2, max_per_class=0):
    """Indices (in input order) of items whose class is in the image labels and whose score reaches
    ``min_score``; the top-scoring item of each present class is always kept.  ``max_per_class`` > 0 keeps
    only that many of the highest-scoring items per class."""
    present = {c + 1 for c in np.nonzero(np.asarray(labels) > 0)[0]}
    ranked = {}
    for i in sorted(range(len(classes)), key=lambda i: -scores[i]):
        if classes[i] in present:
            ranked.setdefault(classes[i], []).append(i)
    keep = set()
    for c, idx in ranked.items():
        idx = [i for k, i in enumerate(idx) if k == 0 or scores[i] >= min_score]
        keep.update(idx[:max_per_class] if max_per_class > 0 else idx)
    return sorted(keep)


def filter_pseudo(dets, labels, min_score=0.2, max_per_class=0):
    """Detections restricted to image-level classes (see keep_for_labels)."""
    keep = keep_for_labels([d[0] for d in dets], [d[2] for d in dets], labels, min_score, max_per_class)
    return [dets[i] for i in keep]


def dense_calibration(module, feat, image, dets, settings=None, labels=None, maps=None):
    """Every detection becomes an instance: attention of the detection box and its same-class rois, fused with
    the class heat-map of the scored rois, cut by the CRF.  Returns a list of InstanceHypothesis."""
    settings = settings or CalibrationSettings()
    if not dets:
        return []
    _, height, width = image.shape
    h = module.head(feat)
    _, _, fh, fw = h.shape
    obj, reg = module.rpn_forward(h)
    rois, _ = module.propose(obj, reg, fh, fw)
    det_boxes = as_boxes([d[1] for d in dets])
    all_rois = np.vstack([det_boxes, rois])
    prob, _ = module.score_rois(h, all_rois)
    predicted = prob[:, 1:].argmax(axis=1) + 1
    n_det = len(dets)
    ov = iou_matrix(det_boxes, rois)

    atts, groups = [], []
    for i, (c, box, _score) in enumerate(dets):
        group = [n_det + j for j in np.nonzero((ov[i] > settings.nms_threshold) & (predicted[n_det:] == c))[0]]
        rows = [i] + group
        atts.append(build_instance_attention(
            proposal_attention(module.trunk, module.cls_branch, rows, [c] * len(rows), all_rois, height, width)))
        groups.append(rows)
    heats = {}
    for c in {d[0] for d in dets}:
        sel = predicted[n_det:] == c
        heats[c] = object_heatmap(rois[sel], prob[n_det:][sel, c], height, width)
    bg = None
    if labels is not None:
        stack = np.zeros((len(labels), height, width))
        for (c, _, _), a in zip(dets, atts):
            stack[c - 1] = np.maximum(stack[c - 1], a)
        bg = background_map(stack, labels)
    out = []
    for i, (c, box, score) in enumerate(dets):
        region = crop_region(all_rois[groups[i]], settings.crf_margin, height, width)
        soft, mbox, flags = fuse_and_segment(atts[i], heats[c], image, settings.crf, region, bg, box)
        out.append(InstanceHypothesis(cls=int(c), box=mbox, mask=soft, weight=float(score), score=float(score),
                                      flags=flags))
        if maps is not None:
            maps[f"{c}_{i}"] = {"attention": atts[i], "heatmap": heats[c], "mask": soft}
    return out


def detections_to_json(dets):
    return [{"class": int(c), "box": [float(v) for v in b], "score": float(s)} for c, b, s in dets]


def detections_from_json(items):
    return [(int(d["class"]), np.asarray(d["box"], dtype=np.float64), float(d["score"])) for d in items]
