"""Multi-label classification over proposals (two-branch MIL head).

Scores and weights are (R, C) arrays; the classification branch carries an
extra leading background column that MIL aggregation ignores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (Flatten, Linear, Module, Network, ReLU, RoiPool, head_block, log_softmax,
                 softmax)

PROB_FLOOR = 1e-12


class InvalidLabelError(ValueError):
    pass


@dataclass
class ImagePrediction:
    s: np.ndarray       # (C,) image scores
    p_hat: np.ndarray   # (C,) softmax over s
    x: np.ndarray       # (R, C) gated proposal scores
    w: np.ndarray       # (R, C) normalized proposal weights


def normalize_weights(x_p):
    """Softmax over proposals (axis 0), separately for every class column."""
    x_p = np.asarray(x_p, dtype=np.float64)
    if x_p.shape[0] < 1:
        raise ValueError("need at least one proposal")
    return softmax(x_p, axis=0)


def aggregate_scores(x_c, w_p):
    x_c = np.asarray(x_c, dtype=np.float64)
    if x_c.shape != w_p.shape:
        raise ValueError(f"score shape {x_c.shape} != weight shape {w_p.shape}")
    x = x_c * w_p
    s = x.sum(axis=0)
    return ImagePrediction(s=s, p_hat=softmax(s), x=x, w=w_p)


def mil_loss(pred, y):
    """-sum_k y_k log p_hat_k with a probability floor; returns (loss, dL/ds)."""
    y = np.asarray(y, dtype=np.float64)
    if not np.any(y > 0):
        raise InvalidLabelError("image label vector has no positive class")
    p = pred.p_hat
    live = p > PROB_FLOOR
    loss = -float(np.sum(y * np.log(np.maximum(p, PROB_FLOOR))))
    dp = np.where(live, -y / np.where(live, p, 1.0), 0.0)
    ds = p * (dp - np.dot(dp, p))
    return loss, ds


def mil_backward(x_c, pred, ds):
    """Chain dL/ds back to the foreground class scores and the raw weight logits."""
    w = pred.w
    dx_c = w * ds[None, :]
    dw = x_c * ds[None, :]
    dx_p = w * (dw - (dw * w).sum(axis=0, keepdims=True))
    return dx_c, dx_p


def proposal_class_loss(logits, labels):
    """Mean softmax cross-entropy over labelled proposals; label -1 marks unlabelled.

    ``logits`` is (R, C+1) with column 0 = background. Returns (loss, dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    grad = np.zeros_like(logits)
    sel = np.nonzero(labels >= 0)[0]
    if len(sel) == 0:
        return 0.0, grad
    lsm = log_softmax(logits[sel], axis=1)
    loss = -float(lsm[np.arange(len(sel)), labels[sel]].mean())
    g = np.exp(lsm)
    g[np.arange(len(sel)), labels[sel]] -= 1.0
    grad[sel] = g / len(sel)
    return loss, grad


class MilModule(Module):
    """Optional dilated head block, roi pooling, fc6/fc7, then class and weight branches.

    By default the rois pool the shared backbone features directly (``head_layers=0``).
    """

    def __init__(self, num_classes, rng, in_ch=64, width=32, fc_dim=256, pool=7, stride=4, name="cls", head_layers=0):
        self.num_classes = num_classes
        if head_layers == 0:
            width = in_ch
        self.head = head_block(in_ch, width, f"{name}.head", rng, layers=head_layers)
        self.trunk = Network([
            RoiPool(pool, pool, stride), Flatten(),
            Linear(width * pool * pool, fc_dim, rng=rng), ReLU(),
            Linear(fc_dim, fc_dim, rng=rng), ReLU(),
        ], f"{name}.trunk")
        self.cls_branch = Network([Linear(fc_dim, num_classes + 1, rng=rng, init_std=0.01)], f"{name}.cls")
        self.weight_branch = Network([Linear(fc_dim, num_classes, rng=rng, init_std=0.01)], f"{name}.weight")

    def forward(self, feat, rois):
        """Returns (x_c with background column, x_p)."""
        h = self.head(feat)
        z = self.trunk(h, rois)
        return self.cls_branch(z), self.weight_branch(z)

    def backward(self, d_xc, d_xp):
        dz = self.cls_branch.backward(d_xc) + self.weight_branch.backward(d_xp)
        return self.head.backward(self.trunk.backward(dz))

    def predict(self, feat, rois):
        x_c, x_p = self.forward(feat, rois)
        return x_c, aggregate_scores(x_c[:, 1:], normalize_weights(x_p))

    def loss_and_backward(self, feat, rois, y, proposal_labels=None):
        """Image-level MIL loss plus the optional single-label proposal loss; returns (loss, dfeat)."""
        x_c, x_p = self.forward(feat, rois)
        pred = aggregate_scores(x_c[:, 1:], normalize_weights(x_p))
        loss, ds = mil_loss(pred, y)
        d_fg, d_xp = mil_backward(x_c[:, 1:], pred, ds)
        d_xc = np.zeros_like(x_c)
        d_xc[:, 1:] = d_fg
        if proposal_labels is not None:
            l2, g2 = proposal_class_loss(x_c, proposal_labels)
            loss += l2
            d_xc += g2
        return loss, self.backward(d_xc, d_xp)
