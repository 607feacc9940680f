"""Detection and segmentation metrics: VOC AP, CorLoc, mIoU, mask AP (mAP^r) and ABO.

Predictions per image are sequences of ``(cls, box, score)`` tuples (boxes) or
``(cls, mask, score)`` tuples (masks); ground truth per image is a sequence of
objects with ``cls``, ``box`` and ``mask`` attributes.  Classes are 1-based.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix


def average_precision(tp, npos):
    """Area under the monotone precision envelope of a ranked TP/FP sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    if npos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def mask_iou_matrix(preds, gts):
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = _mask_iou(p, g)
    return out


def _class_ap(preds, gts, cls, iou_threshold, use_masks):
    """VOC matching: each detection goes to its max-overlap GT; a taken GT makes it a false positive."""
    entries = []
    for img, dets in enumerate(preds):
        for k, d in enumerate(dets):
            if d[0] == cls:
                entries.append((-float(d[2]), img, k))
    # stable sort on score keeps the enumeration order for ties
    entries.sort(key=lambda e: e[0])
    gt_items = [[g for g in image_gts if g.cls == cls] for image_gts in gts]
    npos = sum(len(g) for g in gt_items)
    taken = [np.zeros(len(g), dtype=bool) for g in gt_items]
    tp = []
    for _, img, k in entries:
        cand = gt_items[img]
        if not cand:
            tp.append(0.0)
            continue
        geom = preds[img][k][1]
        if use_masks:
            ov = mask_iou_matrix([np.asarray(geom) >= 0.5], [g.mask for g in cand])[0]
        else:
            ov = iou_matrix(geom, np.array([g.box for g in cand]))[0]
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold and not taken[img][j]:
            taken[img][j] = True
            tp.append(1.0)
        else:
            tp.append(0.0)
    return average_precision(tp, npos)


def voc_map(preds, gts, iou_threshold=0.5, num_classes=3, use_masks=False):
    """Per-class AP (NaN where a class has no ground truth) and their mean over defined classes."""
    aps = np.array([_class_ap(preds, gts, c, iou_threshold, use_masks) for c in range(1, num_classes + 1)])
    defined = aps[~np.isnan(aps)]
    return aps, float(defined.mean()) if len(defined) else float("nan")


def corloc(preds, gts, num_classes=3):
    """Share of images containing class c whose top-scoring class-c candidate has IoU > 0.5 with a c box."""
    hits = np.zeros(num_classes)
    count = np.zeros(num_classes)
    for dets, image_gts in zip(preds, gts):
        for c in {g.cls for g in image_gts}:
            count[c - 1] += 1
            cand = [d for d in dets if d[0] == c]
            if not cand:
                continue
            top = max(enumerate(cand), key=lambda e: (e[1][2], -e[0]))[1]
            boxes = np.array([g.box for g in image_gts if g.cls == c])
            if iou_matrix(top[1], boxes).max() > 0.5:
                hits[c - 1] += 1
    per = np.where(count > 0, hits / np.maximum(count, 1), np.nan)
    defined = per[~np.isnan(per)]
    return per, float(defined.mean()) if len(defined) else float("nan")


def semantic_map(instances, height, width):
    """Flatten (cls, mask, score) predictions: each pixel takes the class of its highest-scoring cover."""
    out = np.zeros((height, width), dtype=int)
    best = np.full((height, width), -np.inf)
    for cls, mask, score in instances:
        m = np.asarray(mask) >= 0.5
        upd = m & (score > best)
        out[upd] = cls
        best[upd] = score
    return out


def gt_semantic_map(image_gts, height, width):
    out = np.zeros((height, width), dtype=int)
    for g in image_gts:
        out[np.asarray(g.mask, dtype=bool)] = g.cls
    return out


def miou(pred_maps, gt_maps, num_classes=3):
    """Per-class IoU over C+1 labels (0 = background) accumulated over the split."""
    inter = np.zeros(num_classes + 1)
    union = np.zeros(num_classes + 1)
    for p, g in zip(pred_maps, gt_maps):
        p = np.asarray(p)
        g = np.asarray(g)
        for c in range(num_classes + 1):
            pc, gc = p == c, g == c
            inter[c] += np.logical_and(pc, gc).sum()
            union[c] += np.logical_or(pc, gc).sum()
    per = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    defined = per[~np.isnan(per)]
    return per, float(defined.mean()) if len(defined) else float("nan")


def map_r(preds, gts, thresholds=(0.25, 0.5, 0.75), num_classes=3):
    """Mask AP at each threshold; ``preds`` hold (cls, soft mask, score)."""
    return {t: voc_map(preds, gts, t, num_classes, use_masks=True)[1] for t in thresholds}


def abo(preds, gts):
    """Mean over ground-truth instances of the best mask IoU reached by a same-class prediction."""
    best = []
    for dets, image_gts in zip(preds, gts):
        for g in image_gts:
            ious = [_mask_iou(np.asarray(d[1]) >= 0.5, g.mask) for d in dets if d[0] == g.cls]
            best.append(max(ious) if ious else 0.0)
    return float(np.mean(best)) if best else float("nan")


def proposal_recall(proposals, gts, iou_threshold=0.5):
    """Fraction of ground-truth boxes covered by some proposal with IoU >= ``iou_threshold``."""
    hit = total = 0
    for boxes, image_gts in zip(proposals, gts):
        if not image_gts:
            continue
        total += len(image_gts)
        if len(boxes) == 0:
            continue
        ov = iou_matrix(np.array([g.box for g in image_gts]), boxes)
        hit += int(np.sum(ov.max(axis=1) >= iou_threshold))
    return hit / total if total else float("nan")


@dataclass
class EvalReport:
    class_names: tuple
    ap: np.ndarray = None
    map: float = float("nan")
    corloc: np.ndarray = None
    mcorloc: float = float("nan")
    iou: np.ndarray = None        # C+1 entries, background first
    miou: float = float("nan")
    map_r: dict = field(default_factory=dict)
    abo: float = float("nan")

    def rows(self):
        c = len(self.class_names)
        nan = np.full(c, np.nan)
        ap = self.ap if self.ap is not None else nan
        cl = self.corloc if self.corloc is not None else nan
        iou = self.iou if self.iou is not None else np.full(c + 1, np.nan)
        out = [{"class": "background", "ap": "", "corloc": "", "iou": _fmt(iou[0])}]
        for k, name in enumerate(self.class_names):
            out.append({"class": name, "ap": _fmt(ap[k]), "corloc": _fmt(cl[k]), "iou": _fmt(iou[k + 1])})
        summary = {"class": "mean", "ap": _fmt(self.map), "corloc": _fmt(self.mcorloc), "iou": _fmt(self.miou)}
        for t, v in sorted(self.map_r.items()):
            summary[f"map_r@{t}"] = _fmt(v)
        summary["abo"] = _fmt(self.abo)
        out.append(summary)
        return out

    def to_csv(self):
        rows = self.rows()
        fields = list(rows[-1].keys())
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in fields})
        return buf.getvalue()

    def pretty(self):
        lines = [f"{'class':<12}{'AP':>10}{'CorLoc':>10}{'IoU':>10}"]
        for r in self.rows()[:-1]:
            lines.append(f"{r['class']:<12}{r['ap']:>10}{r['corloc']:>10}{r['iou']:>10}")
        lines.append(f"mAP {self.map:.4f}  CorLoc {self.mcorloc:.4f}  mIoU {self.miou:.4f}  ABO {self.abo:.4f}")
        lines.append("  ".join(f"mAP^r@{t} {v:.4f}" for t, v in sorted(self.map_r.items())))
        return "\n".join(lines)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) or (np.ndim(v) == 0 and np.isnan(v)) \
        else f"{float(v):.6f}"
