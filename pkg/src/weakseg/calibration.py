"""Proposal calibration: turn per-proposal class evidence into instance masks.

Excitation backprop maps a proposal's winning class unit back onto its roi
grid; NMS groups proposals around a per-class winner whose group maps add up
into an instance attention map; proposal scores rasterize into an object
heat-map; the two fuse into a confidence map that a binary dense CRF cuts
into a mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import as_boxes, box_to_mask, mask_to_box, nms, pixel_span
from .densecrf import CrfParams, mean_field, pairwise_kernel, unary_from_confidence
from .imops import paste_into_box
from .nn import Flatten, Linear, ReLU, StateError, sigmoid, softmax


@dataclass
class InstanceHypothesis:
    cls: int
    box: np.ndarray
    mask: np.ndarray          # H x W soft mask in [0, 1]
    weight: float             # supervision weight in (0, 1]
    score: float = 1.0        # ranking score for evaluation
    flags: list = field(default_factory=list)


@dataclass
class PseudoLabelSet:
    instances: list = field(default_factory=list)
    stage: str = ""
    fallback: bool = False


@dataclass
class CalibrationSettings:
    nms_threshold: float = 0.3
    crf: CrfParams = field(default_factory=CrfParams)
    crf_margin: float = 8.0


def excitation_backprop(layers, inputs, relevance):
    """Winner-take-all relevance sweep from the top of ``layers`` down to their first input.

    ``inputs[k]`` is the cached (non-negative) input of ``layers[k]``, rows
    already restricted to the proposals of interest.  Through a linear layer,
    P_in = a * ((P_out / Z) @ W+) with Z = a @ W+^T; outputs with Z = 0 pass
    nothing down.
    """
    for layer, a in zip(reversed(layers), reversed(inputs)):
        if isinstance(layer, Linear):
            wp = np.maximum(layer.params["W"], 0.0)
            z = a @ wp.T
            ratio = np.divide(relevance, z, out=np.zeros_like(relevance), where=z > 0)
            relevance = a * (ratio @ wp)
        elif isinstance(layer, (ReLU, Flatten)):
            relevance = relevance.reshape(a.shape)
        else:
            raise TypeError(f"excitation backprop cannot pass through {layer.kind}")
    return relevance


def proposal_attention(trunk, branch, rows, units, boxes, height, width):
    """Attention maps (len(rows), H, W) for proposals ``rows`` excited at output ``units``.

    ``trunk`` is roi-pool followed by flatten/fc/relu layers and ``branch`` the
    classifier network, both holding the cached forward pass.
    """
    if trunk.activations is None or branch.activations is None:
        raise StateError("excitation backprop needs a cached forward pass")
    rows = np.asarray(rows, dtype=int)
    if len(rows) == 0:
        return np.zeros((0, height, width))
    top = np.zeros((len(rows), branch.activations[-1].shape[1]))
    top[np.arange(len(rows)), units] = 1.0
    layers = trunk.layers[1:] + branch.layers
    inputs = [a[rows] for a in trunk.activations[1:-1]] + [branch.activations[0][rows]]
    grid = excitation_backprop(layers, inputs, top).sum(axis=1)  # (n, ph, pw)
    boxes = as_boxes(boxes)
    return np.stack([paste_into_box(g, boxes[r], height, width, mass_preserving=True) for g, r in zip(grid, rows)])


def select_winner(boxes, scores, candidates, nms_threshold):
    """NMS over candidate proposals for one class; returns (winner, suppressed group, low_confidence)."""
    cand = np.nonzero(candidates)[0]
    low = False
    if len(cand) == 0:
        cand = np.arange(len(scores))
        low = True
    kept, groups = nms(as_boxes(boxes)[cand], np.asarray(scores)[cand], nms_threshold)
    winner = int(cand[kept[0]])
    group = [int(cand[j]) for j in groups[kept[0]]]
    low = low or float(scores[winner]) <= 0
    return winner, group, low


def select_winners(boxes, scores, classes, nms_threshold, predicted=None):
    """Per-class winner and suppression group.

    ``scores`` is (R, C) by 0-based class column, ``classes`` are 1-based
    class ids; ``predicted`` (R,) restricts each class to proposals predicted
    as that class.
    """
    out = {}
    for c in classes:
        cand = np.ones(len(scores), dtype=bool) if predicted is None else (np.asarray(predicted) == c)
        out[int(c)] = select_winner(boxes, scores[:, c - 1], cand, nms_threshold)
    return out


def normalize_max(m):
    peak = float(m.max()) if m.size else 0.0
    return m / peak if peak > 0 else np.zeros_like(m)


def build_instance_attention(maps):
    """Pixel-wise sum of a group's proposal attention maps, scaled so the peak is 1."""
    return normalize_max(np.clip(np.sum(maps, axis=0), 0.0, None))


def background_map(attention, labels):
    """max(0, 1 - sum_l y_l A_l) for class maps ``attention`` (C, H, W) and 0-based labels (C,)."""
    attention = np.asarray(attention, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.tensordot(np.asarray(labels, dtype=np.float64), attention, axes=1))


def object_heatmap(boxes, scores, height, width):
    """Sum of each proposal's score over the pixels its box covers, peak-normalized."""
    acc = np.zeros((height + 1, width + 1))
    for b, s in zip(as_boxes(boxes), np.asarray(scores, dtype=np.float64)):
        x0, y0, x1, y1 = pixel_span(b, height, width)
        if x1 <= x0 or y1 <= y0:
            continue
        acc[y0, x0] += s
        acc[y0, x1] -= s
        acc[y1, x0] -= s
        acc[y1, x1] += s
    heat = acc.cumsum(axis=0).cumsum(axis=1)[:height, :width]
    return normalize_max(np.clip(heat, 0.0, None))


def crop_region(boxes, margin, height, width):
    b = as_boxes(boxes)
    x0 = int(max(np.floor(b[:, 0].min() - margin), 0))
    y0 = int(max(np.floor(b[:, 1].min() - margin), 0))
    x1 = int(min(np.ceil(b[:, 2].max() + margin), width))
    y1 = int(min(np.ceil(b[:, 3].max() + margin), height))
    return x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)


def crf_on_region(conf, image, region, params, background=None, eps=1e-6):
    """Binary CRF restricted to ``region``; returns the full-size foreground marginal."""
    x0, y0, x1, y1 = region
    sub = conf[y0:y1, x0:x1]
    unary = unary_from_confidence(sub, eps)
    if background is not None:
        bg = np.maximum(1.0 - sub, background[y0:y1, x0:x1])
        unary[0] = -np.log(np.maximum(bg, eps))
    img = image[:, y0:y1, x0:x1]
    kern = None if (params.w_appearance == 0 and params.w_smoothness == 0) else pairwise_kernel(img, params)
    q = mean_field(unary, img, params, kernel=kern)
    out = np.zeros_like(conf)
    out[y0:y1, x0:x1] = q[1]
    return out


def confident_map(attention, heat):
    return np.sqrt(np.clip(attention, 0, None) * np.clip(heat, 0, None))


def segment_confidence(conf, image, params=CrfParams(), region=None, background=None, fallback_box=None):
    """Confident map -> CRF -> (soft mask, tight box, flags).

    An empty foreground falls back to ``fallback_box`` with a rectangular mask.
    """
    _, h, w = image.shape
    if region is None:
        region = (0, 0, w, h)
    soft = crf_on_region(conf, image, region, params, background)
    box = mask_to_box(soft >= 0.5)
    flags = []
    if box is None:
        flags.append("fallback")
        fb = fallback_box if fallback_box is not None else np.array([0.0, 0.0, w, h])
        soft = box_to_mask(fb, h, w).astype(np.float64)
        box = mask_to_box(soft > 0) if soft.any() else np.asarray(fb, dtype=np.float64)
    return soft, box, flags


def fuse_and_segment(attention, heat, image, params=CrfParams(), region=None, background=None, fallback_box=None):
    """Geometric-mean fusion of attention and heat-map, then CRF segmentation."""
    return segment_confidence(confident_map(attention, heat), image, params, region, background, fallback_box)


def calibrate_group(attention_maps, heat, image, winner_box, group_boxes, settings, background=None):
    """Attention of one winner group + heat-map -> instance (mask, box, flags) and the maps used."""
    _, h, w = image.shape
    att = build_instance_attention(attention_maps)
    region = crop_region(np.vstack([winner_box, *group_boxes]) if len(group_boxes) else winner_box,
                         settings.crf_margin, h, w)
    soft, box, flags = fuse_and_segment(att, heat, image, settings.crf, region, background, winner_box)
    return soft, box, flags, att


def calibrate_mil(module, feat, image, boxes, classes, settings, labels=None, maps=None):
    """Classification-stage calibration: one instance per requested class.

    ``classes`` are 1-based ids; ``labels`` (0-based binary vector) feeds the
    background map.  Per-class debug maps are stored into ``maps`` when given.
    """
    _, h, w = image.shape
    boxes = as_boxes(boxes)
    x_c, pred = module.predict(feat, boxes)
    fg = x_c[:, 1:]
    prob = softmax(fg, axis=1)
    predicted = prob.argmax(axis=1) + 1
    winners = select_winners(boxes, fg, classes, settings.nms_threshold, predicted)
    atts, heats = {}, {}
    for c, (win, group, _low) in winners.items():
        rows = [win] + group
        atts[c] = build_instance_attention(
            proposal_attention(module.trunk, module.cls_branch, rows, [c] * len(rows), boxes, h, w))
        sel = predicted == c
        heats[c] = object_heatmap(boxes[sel], prob[sel, c - 1], h, w)
    bg = None
    if labels is not None and atts:
        stack = np.zeros((len(labels), h, w))
        for c, a in atts.items():
            stack[c - 1] = a
        bg = background_map(stack, labels)
    out = []
    for c, (win, group, low) in winners.items():
        region = crop_region(boxes[[win] + group], settings.crf_margin, h, w)
        soft, box, flags = fuse_and_segment(atts[c], heats[c], image, settings.crf, region, bg, boxes[win])
        if low:
            flags.append("low-confidence")
        out.append(InstanceHypothesis(
            cls=int(c), box=box, mask=soft, weight=float(sigmoid(np.array([fg[win, c - 1]]))[0]),
            score=float(pred.p_hat[c - 1]), flags=flags))
        if maps is not None:
            maps[c] = {"attention": atts[c], "heatmap": heats[c], "confident": confident_map(atts[c], heats[c]),
                       "mask": soft}
    if maps is not None and bg is not None:
        maps["background"] = bg
    return out
