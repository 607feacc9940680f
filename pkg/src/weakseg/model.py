"""The shared backbone with its four heads, checkpoint I/O, and backbone pretraining."""
from __future__ import annotations

import hashlib

import numpy as np

from .data import NUM_CLASSES, SynthParams, gen_synthetic
from .detection import DetectionModule, DetectionSettings
from .instance import InstanceModule
from .mil import MilModule
from .nn import (GlobalMaxPool, Linear, SGD, backbone_net, load_checkpoint, make_rng, save_checkpoint,
                 sigmoid)

STAGES = ("cls", "det", "refine", "seg")


def detection_settings(cfg):
    return DetectionSettings(anchor_scales=tuple(cfg.anchor_scales), anchor_ratios=tuple(cfg.anchor_ratios),
                             rpn_nms=cfg.rpn_nms, rpn_post_nms=cfg.rpn_post_nms, det_nms=cfg.det_nms,
                             score_threshold=cfg.score_threshold, mask_rois=cfg.mask_rois)


class Model:
    """Backbone (stride 4, 64 channels) shared by the cls / det / refine / seg modules."""

    def __init__(self, cfg, num_classes=NUM_CLASSES):
        seed = cfg.seed
        self.num_classes = num_classes
        self.backbone = backbone_net(make_rng(seed, 1))
        ds = detection_settings(cfg)
        self.modules = {
            "cls": MilModule(num_classes, make_rng(seed, 2), name="cls"),
            "det": DetectionModule(num_classes, make_rng(seed, 3), name="det", settings=ds),
            "refine": InstanceModule(num_classes, make_rng(seed, 4), name="refine", settings=ds),
            "seg": InstanceModule(num_classes, make_rng(seed, 5), name="seg", settings=ds),
        }

    def __getitem__(self, stage):
        return self.modules[stage]

    def features(self, image):
        return self.backbone(np.asarray(image, dtype=np.float64)[None])

    def named_params(self, stages=STAGES, backbone=True):
        if backbone:
            yield from self.backbone.named_params()
        for s in stages:
            yield from self.modules[s].named_params()

    def zero_grad(self):
        self.backbone.zero_grad()
        for m in self.modules.values():
            m.zero_grad()

    def state_dict(self, stages=STAGES, backbone=True):
        return {name: p[k].copy() for name, p, _, k in self.named_params(stages, backbone)}

    def load_state_dict(self, state, strict=True):
        for name, params, _, key in self.named_params():
            if name not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks {name}")
                continue
            if state[name].shape != params[key].shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {params[key].shape}")
            params[key] = np.array(state[name], dtype=np.float64)

    def save(self, path, stages=STAGES, backbone=True):
        save_checkpoint(path, self.state_dict(stages, backbone))

    def load(self, path, strict=True):
        self.load_state_dict(load_checkpoint(path), strict)

    def backbone_hash(self):
        h = hashlib.sha256()
        for name, p, _, k in self.backbone.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p[k]).tobytes())
        return h.hexdigest()


def pretrain_backbone(backbone, cfg, log=None):
    """Image-classification pretraining of the backbone on a disjoint single-object synthetic split.

    Only image-level class labels are used: global max pooling plus one
    linear layer trained with per-class sigmoid cross-entropy.
    """
    if cfg.pretrain_iters <= 0:
        return []
    params = SynthParams(max_instances=1)
    data = gen_synthetic(cfg.pretrain_images, cfg.seed, params, split="pretrain")
    x_all = np.stack([s.image for s in data])
    y_all = np.stack([s.labels for s in data]).astype(np.float64)
    gpool = GlobalMaxPool()
    fc = Linear(backbone.layers[-2].out_ch, y_all.shape[1], rng=make_rng(cfg.seed, 6), init_std=0.01)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    n, b = len(data), min(cfg.pretrain_batch, len(data))
    losses = []
    for it in range(cfg.pretrain_iters):
        rng = make_rng(cfg.seed, 41, it)
        idx = np.sort(rng.choice(n, b, replace=False))
        x = x_all[idx]
        if cfg.aug_flip and rng.random() < 0.5:
            x = x[..., ::-1]
        y = y_all[idx]
        backbone.zero_grad()
        fc.zero_grad()
        z = fc.forward(gpool.forward(backbone.forward(np.ascontiguousarray(x))))
        p = sigmoid(z)
        loss = float(np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) / len(z))
        backbone.backward(gpool.backward(fc.backward((p - y) / len(z))))
        lr = cfg.pretrain_lr if it < cfg.pretrain_iters * cfg.lr_drop_at else cfg.pretrain_lr * 0.1
        opt.step(list(backbone.named_params()) + [("pretrain.fc.W", fc.params, fc.grads, "W"),
                                                  ("pretrain.fc.b", fc.params, fc.grads, "b")], lr)
        losses.append(loss)
        if log is not None:
            log(it, "pretrain", loss, lr)
    return losses
