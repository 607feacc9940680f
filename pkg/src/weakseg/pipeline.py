"""Cascaded pre-training of the four modules and forward-backward learning with backward validation."""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import as_boxes, iou_matrix
from .calibration import CalibrationSettings, InstanceHypothesis, PseudoLabelSet, calibrate_mil
from .data import CLASS_NAMES, rle_encode
from .densecrf import CrfParams
from .detection import SkipImage, dense_calibration, filter_pseudo, keep_for_labels
from .imops import resize_bilinear
from .instance import instance_infer, refine_with_crf
from .metrics import (EvalReport, abo, corloc, gt_semantic_map, map_r, miou, semantic_map, voc_map)
from .model import STAGES, pretrain_backbone
from .nn import SGD, DivergenceError, make_rng
from .proposals import ProposalParams, generate_proposals

log = logging.getLogger("weakseg")

STAGE_IDS = {s: i for i, s in enumerate(STAGES)}


# ---------------------------------------------------------------- helpers

_WORK = {}


def pseudo_limits(cfg):
    return cfg.pseudo_min_score, cfg.pseudo_max_per_class


def _run_work(i):
    return _WORK["fn"](i)


def parallel_map(fn, n, threads=1):
    """``[fn(i) for i in range(n)]``, fanned out over forked workers when threads > 1; order preserved."""
    if threads <= 1 or n < 2:
        return [fn(i) for i in range(n)]
    _WORK["fn"] = fn
    try:
        with multiprocessing.get_context("fork").Pool(threads) as pool:
            return pool.map(_run_work, range(n), chunksize=max(1, n // (4 * threads)))
    finally:
        _WORK.clear()


def crf_params(cfg):
    return CrfParams(cfg.crf_w_appearance, cfg.crf_w_smoothness, cfg.crf_theta_alpha, cfg.crf_theta_beta,
                     cfg.crf_theta_gamma, cfg.crf_iterations)


def calibration_settings(cfg):
    return CalibrationSettings(cfg.calib_nms, crf_params(cfg), cfg.crf_margin)


def compute_proposals(samples, cfg, split_id):
    params = ProposalParams(cap=cfg.proposal_cap)
    return parallel_map(lambda i: generate_proposals(samples[i].image, params, cfg.seed, (split_id, i)).boxes,
                        len(samples), cfg.threads)


def lr_at(it, iters, base, final, drop_at):
    return base if it < iters * drop_at else final


class View:
    """A rescaled, optionally mirrored copy of a square sample with matching box/mask transforms."""

    def __init__(self, image, size, flip):
        _, h, w = image.shape
        self.factor = size / h
        self.size = size
        self.flip = flip
        img = resize_bilinear(image, size, int(round(w * self.factor))) if size != h else image
        self.image = np.ascontiguousarray(img[..., ::-1]) if flip else img

    def boxes(self, boxes):
        b = as_boxes(boxes) * self.factor
        if self.flip:
            w = self.image.shape[2]
            b = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
        return b

    def masks(self, masks):
        _, h, w = self.image.shape
        out = []
        for m in masks:
            m = resize_bilinear(np.asarray(m, dtype=np.float64), h, w) if m.shape != (h, w) else m
            out.append(m[:, ::-1] if self.flip else m)
        return out


def pick_view(sample, cfg, rng):
    size = int(cfg.aug_scales[rng.integers(len(cfg.aug_scales))]) if cfg.aug_scales else sample.height
    flip = bool(cfg.aug_flip and rng.random() < 0.5)
    return View(sample.image, size, flip)


def batch_order(n, iters, batch, seed, stream):
    """Epoch-wise permutations concatenated until iters*batch indices are available."""
    need = iters * batch
    out = []
    epoch = 0
    while len(out) < need:
        out.extend(make_rng(seed, 21, *stream, epoch).permutation(n).tolist())
        epoch += 1
    return np.array(out[:need], dtype=int).reshape(iters, batch) if need else np.zeros((0, batch), dtype=int)


class TrainLog:
    """CSV training log (iter, stage, loss, lr, wall_ms)."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._t0 = time.perf_counter()
        self._fh = None
        if path:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["iter", "stage", "loss", "lr", "wall_ms"])

    def __call__(self, it, stage, loss, lr):
        wall = int((time.perf_counter() - self._t0) * 1000)
        row = (int(it), stage, float(loss), float(lr), wall)
        self.rows.append(row)
        if self._fh:
            self._writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:g}", row[4]])

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------- pseudo labels

class PseudoLabelStore:
    """image index -> PseudoLabelSet, tagged with the stage that produced it."""

    def __init__(self, stage, sets=None):
        self.stage = stage
        self.sets = dict(sets or {})

    def __getitem__(self, i):
        return self.sets[i]

    def __len__(self):
        return len(self.sets)

    def fallback_count(self):
        return sum(1 for s in self.sets.values() if s.fallback)

    def to_jsonl(self, path, names=None):
        with open(path, "w") as f:
            for i in sorted(self.sets):
                ps = self.sets[i]
                f.write(json.dumps({
                    "image": names[i] if names else i, "stage": ps.stage, "fallback": ps.fallback,
                    "instances": [{"class": h.cls, "box": [float(v) for v in h.box], "weight": h.weight,
                                   "score": h.score, "mask_rle": rle_encode(h.mask >= 0.5)} for h in ps.instances],
                }) + "\n")

    def digest(self):
        parts = []
        for i in sorted(self.sets):
            for h in self.sets[i].instances:
                parts.append((i, h.cls, tuple(np.round(h.box, 9)), round(h.weight, 12),
                              float(np.round(h.mask.sum(), 6))))
        return parts


def _with_fallback(stage, instances, prev):
    if instances:
        return PseudoLabelSet(instances, stage, False)
    base = prev.instances if prev is not None else []
    return PseudoLabelSet(list(base), stage, True)


def produce_cls_labels(model, samples, proposals, cfg):
    settings = calibration_settings(cfg)

    def one(i):
        s = samples[i]
        classes = [c + 1 for c in np.nonzero(s.labels > 0)[0]]
        hyps = calibrate_mil(model["cls"], model.features(s.image), s.image, proposals[i], classes, settings,
                             labels=s.labels)
        return PseudoLabelSet(hyps, "cls", False)

    return PseudoLabelStore("cls", enumerate(parallel_map(one, len(samples), cfg.threads)))


def produce_det_labels(model, samples, cfg, prev):
    settings = calibration_settings(cfg)

    def one(i):
        s = samples[i]
        feat = model.features(s.image)
        dets = filter_pseudo(model["det"].infer(feat)[0], s.labels, *pseudo_limits(cfg))
        hyps = dense_calibration(model["det"], feat, s.image, dets, settings, labels=s.labels)
        return _with_fallback("det", hyps, prev[i])

    return PseudoLabelStore("det", enumerate(parallel_map(one, len(samples), cfg.threads)))


def instance_predictions(module, image, cfg, feat, labels=None):
    """Mask-head inference followed by CRF refinement; optionally restricted to the image labels."""
    _, h, w = image.shape
    hyps = instance_infer(module, feat, h, w)
    if labels is not None:
        keep = keep_for_labels([x.cls for x in hyps], [x.score for x in hyps], labels, *pseudo_limits(cfg))
        hyps = [hyps[i] for i in keep]
    return refine_with_crf(hyps, image, crf_params(cfg), cfg.calib_nms, cfg.crf_margin)


def produce_refine_labels(model, samples, cfg, prev):
    def one(i):
        s = samples[i]
        hyps = instance_predictions(model["refine"], s.image, cfg, model.features(s.image), s.labels)
        return _with_fallback("refine", hyps, prev[i])

    return PseudoLabelStore("refine", enumerate(parallel_map(one, len(samples), cfg.threads)))


def backward_validation_step(dets, proposals, beta=0.5, bg_iou=0.1):
    """Per-proposal labels from detections: class if max IoU > beta, 0 if below bg_iou, else -1."""
    props = as_boxes(proposals)
    if len(dets) == 0:
        return np.full(len(props), -1)
    ov = iou_matrix(props, as_boxes([d[1] for d in dets]))
    best = ov.argmax(axis=1)
    best_ov = ov[np.arange(len(props)), best]
    cls = np.array([d[0] for d in dets])
    labels = np.full(len(props), -1)
    labels[best_ov < bg_iou] = 0
    pos = best_ov > beta
    labels[pos] = cls[best[pos]]
    return labels


# ---------------------------------------------------------------- per-image losses

def _pseudo_arrays(ps, view, with_masks):
    if ps is None or not ps.instances:
        raise SkipImage("empty pseudo-label set")
    boxes = view.boxes([h.box for h in ps.instances])
    classes = np.array([h.cls for h in ps.instances])
    weights = np.array([h.weight for h in ps.instances])
    if with_masks:
        return boxes, classes, weights, view.masks([h.mask for h in ps.instances])
    return boxes, classes, weights


def stage_loss(model, stage, feat, view, sample, proposals, ps, rng, proposal_labels=None):
    """One image's loss for ``stage``; returns (loss, dfeat)."""
    module = model[stage]
    props = view.boxes(proposals)
    if stage == "cls":
        return module.loss_and_backward(feat, props, sample.labels, proposal_labels)
    pseudo = _pseudo_arrays(ps, view, stage in ("refine", "seg"))
    loss, dfeat, _ = module.loss_and_backward(feat, pseudo, rng, extra_rois=[props])
    return loss, dfeat


def _check(loss, stage, it):
    if not np.isfinite(loss):
        raise DivergenceError(f"stage {stage}: non-finite loss at iteration {it}")


def train_stage(model, stage, samples, proposals, store, cfg, tlog, iters=None):
    """SGD on one module with the backbone frozen."""
    iters = getattr(cfg, f"{stage}_iters") if iters is None else iters
    module = model[stage]
    opt = SGD(cfg.momentum, cfg.weight_decay)
    order = batch_order(len(samples), iters, cfg.batch_size, cfg.seed, (STAGE_IDS[stage],))
    for it in range(iters):
        lr = lr_at(it, iters, cfg.lr, cfg.lr_final, cfg.lr_drop_at)
        module.zero_grad()
        total, used = 0.0, 0
        for b, i in enumerate(order[it]):
            rng = make_rng(cfg.seed, 31, STAGE_IDS[stage], it, b)
            view = pick_view(samples[i], cfg, rng)
            feat = model.backbone(view.image[None])
            try:
                loss, _ = stage_loss(model, stage, feat, view, samples[i], proposals[i],
                                     store[i] if store is not None else None, rng)
            except SkipImage:
                continue
            _check(loss, stage, it)
            total += loss
            used += 1
        if used:
            opt.step(list(module.named_params()), lr)
        tlog(it, stage, total / max(used, 1), lr)


# ---------------------------------------------------------------- evaluation

def stage_outputs(model, stage, sample, proposals, cfg):
    """Test-time (boxes, masks) of one stage: lists of (cls, box, score) and (cls, mask, score)."""
    feat = model.features(sample.image)
    if stage == "cls":
        classes = list(range(1, model.num_classes + 1))
        hyps = calibrate_mil(model["cls"], feat, sample.image, proposals, classes, calibration_settings(cfg))
    elif stage == "det":
        return model["det"].infer(feat)[0], None
    else:
        hyps = instance_predictions(model[stage], sample.image, cfg, feat)
    return [(h.cls, h.box, h.score) for h in hyps], [(h.cls, h.mask, h.score) for h in hyps]


def evaluate_stage(model, stage, samples, proposals, cfg, masks=True):
    outs = parallel_map(lambda i: stage_outputs(model, stage, samples[i], proposals[i], cfg), len(samples),
                        cfg.threads)
    boxes = [o[0] for o in outs]
    gts = [s.instances for s in samples]
    rep = EvalReport(CLASS_NAMES)
    rep.ap, rep.map = voc_map(boxes, gts, 0.5, model.num_classes)
    rep.corloc, rep.mcorloc = corloc(boxes, gts, model.num_classes)
    if masks and outs and outs[0][1] is not None:
        inst = [o[1] for o in outs]
        sem = [semantic_map(p, s.height, s.width) for p, s in zip(inst, samples)]
        gsem = [gt_semantic_map(s.instances, s.height, s.width) for s in samples]
        rep.iou, rep.miou = miou(sem, gsem, model.num_classes)
        rep.map_r = map_r(inst, gts, num_classes=model.num_classes)
        rep.abo = abo(inst, gts)
    return rep, outs


def report_dict(rep):
    def arr(a):
        return None if a is None else [None if np.isnan(v) else float(v) for v in a]

    def num(v):
        return None if v is None or np.isnan(v) else float(v)

    return {"ap": arr(rep.ap), "map": num(rep.map), "corloc": arr(rep.corloc), "mcorloc": num(rep.mcorloc),
            "iou": arr(rep.iou), "miou": num(rep.miou), "map_r": {str(k): num(v) for k, v in rep.map_r.items()},
            "abo": num(rep.abo)}


# ---------------------------------------------------------------- cascade

@dataclass
class CascadeResult:
    stores: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""


def run_cascade_pretrain(model, train, cfg, tlog, test=None, train_props=None, test_props=None, pretrain=True):
    """Backbone pretraining, then cls -> det -> refine -> seg with the backbone frozen."""
    res = CascadeResult()
    if pretrain:
        t = time.perf_counter()
        pretrain_backbone(model.backbone, cfg, tlog)
        log.info("backbone pretraining done in %.1fs", time.perf_counter() - t)
    res.backbone_hash_before = model.backbone_hash()
    train_props = train_props if train_props is not None else compute_proposals(train, cfg, 0)
    if test is not None and test_props is None:
        test_props = compute_proposals(test, cfg, 1)

    def evaluate(stage):
        if test is not None and cfg.eval_stages:
            rep, _ = evaluate_stage(model, stage, test, test_props, cfg, masks=stage in ("refine", "seg"))
            res.reports[stage] = rep
            log.info("stage %s: test mAP@0.5 %.4f CorLoc %.4f", stage, rep.map, rep.mcorloc)

    prev = None
    for stage in STAGES:
        t = time.perf_counter()
        train_stage(model, stage, train, train_props, prev, cfg, tlog)
        log.info("stage %s trained in %.1fs", stage, time.perf_counter() - t)
        evaluate(stage)
        if stage == "seg":
            break
        t = time.perf_counter()
        if stage == "cls":
            prev = produce_cls_labels(model, train, train_props, cfg)
        elif stage == "det":
            prev = produce_det_labels(model, train, cfg, prev)
        else:
            prev = produce_refine_labels(model, train, cfg, prev)
        res.stores[stage] = prev
        log.info("pseudo labels from %s in %.1fs (%d fallbacks)", stage, time.perf_counter() - t,
                 prev.fallback_count())
    res.backbone_hash_after = model.backbone_hash()
    return res


# ---------------------------------------------------------------- forward-backward

def regenerate_stores(model, train, props, cfg, stores):
    s1 = produce_cls_labels(model, train, props, cfg)
    s2 = produce_det_labels(model, train, cfg, s1)
    s3 = produce_refine_labels(model, train, cfg, s2)
    return {"cls": s1, "det": s2, "refine": s3}


class _InverseView:
    """Maps boxes and masks predicted on a View back to the native frame."""

    def __init__(self, view, height, width):
        self.view = view
        self.height, self.width = height, width

    def boxes(self, boxes):
        b = as_boxes(boxes).copy()
        v = self.view
        if v.flip:
            w = v.image.shape[2]
            b = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1)
        return b / v.factor

    def mask(self, m):
        m = m[:, ::-1] if self.view.flip else m
        return resize_bilinear(m, self.height, self.width) if m.shape != (self.height, self.width) else m


def _native_set(hyps, inv, stage):
    if not hyps:
        return None
    out = [InstanceHypothesis(cls=h.cls, box=inv.boxes(h.box)[0], mask=None if h.mask is None else inv.mask(h.mask),
                              weight=h.weight, score=h.score, flags=list(h.flags)) for h in hyps]
    return PseudoLabelSet(out, stage, False)


def _fb_image(model, cfg, sample, index, proposals, stores, rng, backward_phase, losses):
    """All module losses of one forward-backward iteration on one image; the backbone gradient is accumulated."""
    view = pick_view(sample, cfg, rng)
    feat = model.backbone(view.image[None])
    dfeat = np.zeros_like(feat)

    def step(stage, ps, key, proposal_labels=None):
        try:
            loss, d = stage_loss(model, stage, feat, view, sample, proposals, ps, rng, proposal_labels)
        except SkipImage:
            return
        losses[key] = losses.get(key, 0.0) + loss
        dfeat[...] += d

    step("cls", None, "cls")
    step("det", stores["cls"][index], "det")
    step("refine", stores["det"][index], "refine")
    step("seg", stores["refine"][index], "seg")

    if backward_phase:
        inv = _InverseView(view, sample.height, sample.width)
        seg_out = instance_predictions(model["seg"], view.image, cfg, feat, sample.labels)
        step("refine", _native_set(seg_out, inv, "seg"), "refine_bwd")
        ref_dets = filter_pseudo(model["refine"].infer(feat)[0], sample.labels, *pseudo_limits(cfg))
        ref_hyps = [InstanceHypothesis(cls=c, box=b, mask=None, weight=s, score=s) for c, b, s in ref_dets]
        step("det", _native_set(ref_hyps, inv, "refine"), "det_bwd")
        det_dets = filter_pseudo(model["det"].infer(feat)[0], sample.labels, *pseudo_limits(cfg))
        labels = backward_validation_step(det_dets, view.boxes(proposals), cfg.beta, cfg.bg_iou)
        step("cls", None, "cls_bwd", labels)
    model.backbone.backward(dfeat)


def run_forward_backward(model, train, stores, cfg, tlog, train_props=None):
    """Alternating forward (cls -> seg) and backward (seg -> refine -> det -> cls) steps, backbone unfrozen."""
    props = train_props if train_props is not None else compute_proposals(train, cfg, 0)
    stores = dict(stores)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    order = batch_order(len(train), cfg.fb_iters, cfg.batch_size, cfg.seed, (9,))
    for it in range(cfg.fb_iters):
        if it > 0 and cfg.refresh_interval > 0 and it % cfg.refresh_interval == 0:
            t = time.perf_counter()
            stores = regenerate_stores(model, train, props, cfg, stores)
            log.info("fb iteration %d: pseudo labels refreshed in %.1fs", it, time.perf_counter() - t)
        model.zero_grad()
        losses = {}
        backward_phase = cfg.bv_interval > 0 and it % cfg.bv_interval == 0
        for b, i in enumerate(order[it]):
            rng = make_rng(cfg.seed, 51, it, b)
            _fb_image(model, cfg, train[i], i, props[i], stores, rng, backward_phase, losses)
        total = float(sum(losses.values()))
        _check(total, "fb", it)
        opt.step(list(model.named_params()), cfg.fb_lr)
        tlog(it, "fb", total, cfg.fb_lr)
    return stores
