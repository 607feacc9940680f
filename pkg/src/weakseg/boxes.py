"""Axis-aligned box helpers. Boxes are (x1, y1, x2, y2) in continuous pixel coordinates."""
from __future__ import annotations

import numpy as np


class DegenerateAnchorError(ValueError):
    pass


def as_boxes(boxes):
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def area(boxes):
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b):
    a, b = as_boxes(a), as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b):
    return float(iou_matrix(a, b)[0, 0])


def nms(boxes, scores, threshold):
    """Greedy NMS.

    Returns ``(kept, groups)`` where ``kept`` lists indices in descending score
    order and ``groups[k]`` holds the indices suppressed by kept box ``k``.
    Equal scores are ranked by ascending index.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(boxes), dtype=bool)
    kept, groups = [], {}
    ious = iou_matrix(boxes, boxes) if len(boxes) <= 2000 else None
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        ov = ious[i, rest] if ious is not None else iou_matrix(boxes[i], boxes[rest])[0]
        sup = rest[ov > threshold]
        alive[sup] = False
        groups[int(i)] = [int(j) for j in sup]
    return kept, groups


def encode_box(anchor, target):
    """Center/log-size offsets of ``target`` relative to ``anchor`` (row-wise for arrays)."""
    a, t = as_boxes(anchor), as_boxes(target)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateAnchorError("anchor with non-positive extent")
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    out = np.stack([
        ((t[:, 0] + 0.5 * tw) - (a[:, 0] + 0.5 * aw)) / aw,
        ((t[:, 1] + 0.5 * th) - (a[:, 1] + 0.5 * ah)) / ah,
        np.log(tw / aw),
        np.log(th / ah),
    ], axis=1)
    return out[0] if np.ndim(anchor) == 1 and np.ndim(target) == 1 else out


def decode_box(anchor, t, max_log=np.log(1000.0 / 16)):
    a = as_boxes(anchor)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateAnchorError("anchor with non-positive extent")
    cx = a[:, 0] + 0.5 * aw + t[:, 0] * aw
    cy = a[:, 1] + 0.5 * ah + t[:, 1] * ah
    w = aw * np.exp(np.minimum(t[:, 2], max_log))
    h = ah * np.exp(np.minimum(t[:, 3], max_log))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if np.ndim(anchor) == 1 and np.ndim(t) == 1 else out


def clip_boxes(boxes, width, height):
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def mask_to_box(mask):
    """Tight pixel box of a boolean mask, or None when the mask is empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def pixel_span(box, height, width):
    """Integer pixel ranges [x0, x1) x [y0, y1) whose pixel centres fall inside ``box``."""
    x0 = int(np.clip(np.ceil(box[0] - 0.5), 0, width))
    y0 = int(np.clip(np.ceil(box[1] - 0.5), 0, height))
    x1 = int(np.clip(np.ceil(box[2] - 0.5), 0, width))
    y1 = int(np.clip(np.ceil(box[3] - 0.5), 0, height))
    return x0, y0, max(x1, x0), max(y1, y0)


def box_to_mask(box, height, width):
    m = np.zeros((height, width), dtype=bool)
    x0, y0, x1, y1 = pixel_span(box, height, width)
    m[y0:y1, x0:x1] = True
    return m
