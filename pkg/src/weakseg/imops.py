"""Image resampling helpers shared by data, calibration and the mask head."""
from __future__ import annotations

import numpy as np

from .boxes import pixel_span


def _axis_weights(n_in, n_out):
    # half-pixel centers (align_corners=False)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(arr, out_h, out_w):
    """Bilinear resize over the last two axes."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    my = _axis_weights(h, out_h)
    mx = _axis_weights(w, out_w)
    return np.matmul(np.matmul(my, arr), mx.T)


def resize_nearest(arr, out_h, out_w):
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., ys[:, None], xs[None, :]]


def paste_into_box(patch, box, height, width, mass_preserving=False):
    """Bilinearly resample ``patch`` (h, w) onto the integer pixel span of ``box`` in an H x W canvas."""
    canvas = np.zeros((height, width))
    x1, y1, x2, y2 = pixel_span(box, height, width)
    x1, y1 = min(x1, width - 1), min(y1, height - 1)
    x2, y2 = max(x2, x1 + 1), max(y2, y1 + 1)
    up = resize_bilinear(patch, y2 - y1, x2 - x1)
    if mass_preserving:
        s = up.sum()
        up = up * (patch.sum() / s) if s > 0 else up
    canvas[y1:y2, x1:x2] = up
    return canvas


def crop_resize(mask, box, out_h, out_w):
    """Crop ``mask`` to ``box`` (continuous coords) and bilinearly resample to out_h x out_w."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    bw, bh = max(x2 - x1, 1e-6), max(y2 - y1, 1e-6)
    ys = y1 + (np.arange(out_h) + 0.5) * bh / out_h - 0.5
    xs = x1 + (np.arange(out_w) + 0.5) * bw / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1i = np.minimum(y0 + 1, h - 1)
    x1i = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = mask[y0[:, None], x0[None, :]]
    b = mask[y0[:, None], x1i[None, :]]
    c = mask[y1i[:, None], x0[None, :]]
    d = mask[y1i[:, None], x1i[None, :]]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
