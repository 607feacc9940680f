"""Class-agnostic object proposals from graph-based segmentation plus a sliding grid."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import make_rng


@dataclass
class ProposalParams:
    ks: tuple = (0.3, 0.8, 2.0)
    sigma: float = 0.8
    min_segment: int = 12
    grid_scales: tuple = (16, 32, 48)
    grid_ratios: tuple = (0.5, 1.0, 2.0)
    min_side: float = 4.0
    cap: int = 300


@dataclass
class ProposalSet:
    boxes: np.ndarray
    source: list = field(default_factory=list)  # "graph-seg" or "grid" per box

    def __len__(self):
        return len(self.boxes)


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, a):
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a, b, weight):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def _grid_edges(img):
    """8-connected pixel edges and their colour distances for a C x H x W image."""
    _, h, w = img.shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:], img[:, :, :-1] - img[:, :, 1:]),
        (idx[:-1, :], idx[1:, :], img[:, :-1, :] - img[:, 1:, :]),
        (idx[:-1, :-1], idx[1:, 1:], img[:, :-1, :-1] - img[:, 1:, 1:]),
        (idx[1:, :-1], idx[:-1, 1:], img[:, 1:, :-1] - img[:, :-1, 1:]),
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    wgt = np.concatenate([np.sqrt((p[2] ** 2).sum(axis=0)).ravel() for p in pairs])
    return a, b, wgt


def graph_segment(image, k, sigma=0.8, min_size=12):
    """Felzenszwalb-Huttenlocher segmentation; returns an H x W label map with labels 0..n-1.

    Two components merge across an edge of weight ``w`` when
    ``w <= min(Int(A) + k/|A|, Int(B) + k/|B|)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    if sigma > 0:
        img = np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in img])
    a, b, wgt = _grid_edges(img)
    order = np.argsort(wgt, kind="stable")
    a, b, wgt = a[order].tolist(), b[order].tolist(), wgt[order].tolist()
    ds = _DisjointSet(h * w)
    find = ds.find
    for u, v, e in zip(a, b, wgt):
        ru, rv = find(u), find(v)
        if ru == rv:
            continue
        if e <= min(ds.internal[ru] + k / ds.size[ru], ds.internal[rv] + k / ds.size[rv]):
            ds.union(ru, rv, e)
    for u, v in zip(a, b):
        ru, rv = find(u), find(v)
        if ru != rv and (ds.size[ru] < min_size or ds.size[rv] < min_size):
            ds.union(ru, rv, ds.internal[ru])
    roots = np.array([find(i) for i in range(h * w)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels.reshape(h, w)


def segment_boxes(labels):
    """Bounding boxes of every segment and of every 4-adjacent segment pair's union."""
    h, w = labels.shape
    n = int(labels.max()) + 1
    ys, xs = np.mgrid[0:h, 0:w]
    flat = labels.ravel()
    x1 = np.full(n, w, dtype=float)
    y1 = np.full(n, h, dtype=float)
    x2 = np.zeros(n)
    y2 = np.zeros(n)
    np.minimum.at(x1, flat, xs.ravel())
    np.minimum.at(y1, flat, ys.ravel())
    np.maximum.at(x2, flat, xs.ravel() + 1)
    np.maximum.at(y2, flat, ys.ravel() + 1)
    singles = np.stack([x1, y1, x2, y2], axis=1)
    adj = set()
    for la, lb in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = la != lb
        lo = np.minimum(la[diff], lb[diff])
        hi = np.maximum(la[diff], lb[diff])
        adj.update(zip(lo.tolist(), hi.tolist()))
    pairs = sorted(adj)
    if pairs:
        p = np.array(pairs)
        sa, sb = singles[p[:, 0]], singles[p[:, 1]]
        unions = np.concatenate([np.minimum(sa[:, :2], sb[:, :2]), np.maximum(sa[:, 2:], sb[:, 2:])], axis=1)
    else:
        unions = np.zeros((0, 4))
    return singles, unions


def grid_boxes(height, width, scales=(16, 32, 48), ratios=(0.5, 1.0, 2.0)):
    out = []
    for s in scales:
        for r in ratios:
            bw = s / np.sqrt(r)
            bh = s * np.sqrt(r)
            bw, bh = min(bw, width), min(bh, height)
            xs = np.arange(0, width - bw + 1e-9, bw / 2)
            ys = np.arange(0, height - bh + 1e-9, bh / 2)
            for y in ys:
                for x in xs:
                    out.append([x, y, x + bw, y + bh])
    return np.round(np.array(out), 6) if out else np.zeros((0, 4))


def generate_proposals(image, params=ProposalParams(), seed=0, stream=()):
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    seg = []
    for k in params.ks:
        labels = graph_segment(image, k, params.sigma, params.min_segment)
        singles, unions = segment_boxes(labels)
        seg.extend([singles, unions])
    seg = np.concatenate(seg) if seg else np.zeros((0, 4))
    grid = grid_boxes(h, w, params.grid_scales, params.grid_ratios)
    boxes = np.concatenate([seg, grid])
    source = np.array(["graph-seg"] * len(seg) + ["grid"] * len(grid))
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= params.min_side) & ((boxes[:, 3] - boxes[:, 1]) >= params.min_side)
    boxes, source = boxes[keep], source[keep]
    # dedupe on exact coordinates, first occurrence wins (graph-seg precedes grid)
    _, first = np.unique(boxes, axis=0, return_index=True)
    first = np.sort(first)
    boxes, source = boxes[first], source[first]
    if len(boxes) > params.cap:
        rng = make_rng(seed, 11, *stream)
        pick = np.sort(rng.choice(len(boxes), size=params.cap, replace=False))
        boxes, source = boxes[pick], source[pick]
    return ProposalSet(boxes, source.tolist())


def save_proposals(path, image_path, proposals):
    with open(path, "w") as f:
        json.dump({"image": str(image_path), "boxes": [[float(v) for v in b] for b in proposals.boxes]}, f)


def load_proposals(path):
    with open(path) as f:
        rec = json.load(f)
    return rec["image"], ProposalSet(np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4))
