"""Instance refinement / segmentation: the detection heads plus an ASPP mask branch on 14x14 roi features."""
from __future__ import annotations

import numpy as np

from .boxes import as_boxes, nms
from .calibration import InstanceHypothesis, crop_region, normalize_max, segment_confidence
from .densecrf import CrfParams
from .detection import DetectionModule
from .imops import crop_resize, paste_into_box
from .nn import Conv2d, Network, ReLU, RoiPool, sigmoid

ASPP_DILATIONS = (1, 2, 4, 6)


def mask_loss(logits, classes, targets, weights):
    """Mean over rois of w* times the per-pixel mean BCE on the roi's class channel.

    ``logits`` (R, C, m, m), ``classes`` 1-based (R,), ``targets`` (R, m, m) in {0,1}.
    Returns (loss, d_logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    r = len(logits)
    if r == 0:
        return 0.0, grad
    rows = np.arange(r)
    ch = np.asarray(classes, dtype=int) - 1
    z = logits[rows, ch]
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    npix = z[0].size
    loss = float((w * bce.reshape(r, -1).mean(axis=1)).sum() / r)
    grad[rows, ch] = (sigmoid(z) - y) * (w / (r * npix))[:, None, None]
    return loss, grad


def mask_targets(masks, rois, size=14):
    """Pseudo masks cropped to each roi, bilinearly resampled to size x size, thresholded at 0.5."""
    return np.stack([crop_resize(m, b, size, size) >= 0.5 for m, b in zip(masks, as_boxes(rois))]).astype(np.float64)


class InstanceModule(DetectionModule):
    """Detection module with a per-class mask branch: four dilated 3x3 convs, concatenated, then a 1x1 conv."""

    def __init__(self, num_classes, rng, in_ch=64, width=32, fc_dim=256, mask_size=14, aspp_width=16,
                 name="ins", settings=None):
        super().__init__(num_classes, rng, in_ch, width, fc_dim, name=name, settings=settings)
        self.mask_size = mask_size
        self.mask_pool = Network([RoiPool(mask_size, mask_size, self.settings.stride)], f"{name}.mask_pool")
        self.aspp = [Network([Conv2d(width, aspp_width, 3, dilation=d, rng=rng, pad_mode="edge"), ReLU()],
                             f"{name}.aspp{d}") for d in ASPP_DILATIONS]
        self.mask_out = Network([Conv2d(aspp_width * len(ASPP_DILATIONS), num_classes, 1, rng=rng, init_std=0.01)],
                                f"{name}.mask_out")

    def networks(self):
        return super().networks() + list(self.aspp)

    def mask_forward(self, h, rois):
        x = self.mask_pool(h, rois)
        return self.mask_out(np.concatenate([b(x) for b in self.aspp], axis=1))

    def mask_backward(self, d_logits):
        dcat = self.mask_out.backward(d_logits)
        widths = [b.layers[0].out_ch for b in self.aspp]
        splits = np.split(dcat, np.cumsum(widths)[:-1], axis=1)
        dx = sum(b.backward(d) for b, d in zip(self.aspp, splits))
        return self.mask_pool.backward(dx)

    def loss_and_backward(self, feat, pseudo, rng, extra_rois=()):
        """Detection losses plus the weighted mask loss on foreground rois; pseudo = (boxes, classes, weights, masks)."""
        boxes, classes, weights, masks = pseudo
        loss, dh, parts, h, sample = self._losses(feat, pseudo, rng, extra_rois)
        rois, labels, w, _, matched = sample
        fg = np.nonzero(labels > 0)[0]
        cap = self.settings.mask_rois
        if 0 < cap < len(fg):
            fg = np.sort(rng.choice(fg, cap, replace=False))
        parts["mask"] = 0.0
        if len(fg):
            tgt = mask_targets([masks[matched[i]] for i in fg], rois[fg], self.mask_size)
            logits = self.mask_forward(h, rois[fg])
            l_mask, d_logits = mask_loss(logits, labels[fg], tgt, w[fg])
            dh = dh + self.mask_backward(d_logits)
            loss += l_mask
            parts["mask"] = l_mask
        return loss, self.head.backward(dh), parts

    def infer_masks(self, h, dets, height, width):
        if not dets:
            return []
        boxes = as_boxes([d[1] for d in dets])
        prob = sigmoid(self.mask_forward(h, boxes))
        out = []
        for k, (c, box, score) in enumerate(dets):
            m = np.clip(paste_into_box(prob[k, c - 1], box, height, width), 0.0, 1.0)
            out.append(InstanceHypothesis(cls=int(c), box=np.asarray(box, dtype=np.float64), mask=m,
                                          weight=float(score), score=float(score)))
        return out


def instance_infer(module, feat, height, width):
    """Detections with their 14x14 sigmoid masks pasted into the detection boxes."""
    dets, _, _ = module.infer(feat)
    return module.infer_masks(module.head.activations[-1], dets, height, width)


def refine_with_crf(hyps, image, params=CrfParams(), nms_threshold=0.3, margin=8.0):
    """Group same-class hypotheses by NMS, sum and max-normalize each group's masks, then run the CRF."""
    _, height, width = image.shape
    out = []
    for c in sorted({h.cls for h in hyps}):
        members = [h for h in hyps if h.cls == c]
        boxes = as_boxes([h.box for h in members])
        kept, groups = nms(boxes, np.array([h.score for h in members]), nms_threshold)
        for k in kept:
            idx = [k] + groups[k]
            conf = normalize_max(np.clip(sum(members[i].mask for i in idx), 0.0, None))
            region = crop_region(boxes[idx], margin, height, width)
            soft, box, flags = segment_confidence(conf, image, params, region, None, boxes[k])
            lead = members[k]
            out.append(InstanceHypothesis(cls=c, box=box, mask=soft, weight=lead.weight, score=lead.score,
                                          flags=list(lead.flags) + flags))
    out.sort(key=lambda h: -h.score)
    return out
