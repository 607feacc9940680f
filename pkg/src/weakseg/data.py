"""Synthetic shapes dataset and its on-disk format.

Images are 3 x H x W float arrays in [0, 1], quantized to 8-bit levels so a
sample written to PNG and read back is bit-identical.  Instance classes are
1-based (0 is background); ``labels`` is the 0-based binary class vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import iou_matrix, mask_to_box
from .imops import resize_bilinear
from .nn import make_rng

CLASS_NAMES = ("circle", "square", "triangle")
NUM_CLASSES = len(CLASS_NAMES)

SPLIT_IDS = {"train": 0, "test": 1}


@dataclass
class Instance:
    cls: int
    box: np.ndarray
    mask: np.ndarray


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    instances: list = field(default_factory=list)
    name: str = ""

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


@dataclass
class SynthParams:
    size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_object: int = 10
    max_object: int = 28
    max_mutual_iou: float = 0.3
    min_contrast: float = 0.45
    texture_amplitude: float = 0.12
    pixel_noise: float = 0.015


def _value_noise(rng, size, cells):
    grid = rng.random((3, cells + 1, cells + 1))
    return resize_bilinear(grid, size, size)


def _shape_mask(kind, x0, y0, s, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 1:
        r = s / 2.0
        return (xx - x0 - r) ** 2 + (yy - y0 - r) ** 2 <= r * r
    if kind == 2:
        return (xx >= x0) & (xx < x0 + s) & (yy >= y0) & (yy < y0 + s)
    # upright isosceles triangle inside the s x s box
    apex_x, top, bottom = x0 + s / 2.0, y0, y0 + s
    t = (yy - top) / s
    half = t * s / 2.0
    return (yy >= top) & (yy < bottom) & (np.abs(xx - apex_x) <= half)


def make_sample(rng, params=SynthParams(), name=""):
    n = params.size
    base = rng.uniform(0.25, 0.75, size=3)
    tex = params.texture_amplitude
    img = base[:, None, None] + tex * (_value_noise(rng, n, 4) - 0.5) + 0.5 * tex * (_value_noise(rng, n, 8) - 0.5)
    count = int(rng.integers(params.min_instances, params.max_instances + 1))
    masks, classes, boxes = [], [], []
    for _ in range(count):
        for _attempt in range(50):
            cls = int(rng.integers(1, NUM_CLASSES + 1))
            s = int(rng.integers(params.min_object, params.max_object + 1))
            x0 = int(rng.integers(0, n - s + 1))
            y0 = int(rng.integers(0, n - s + 1))
            m = _shape_mask(cls, x0, y0, s, n)
            box = mask_to_box(m)
            if boxes and iou_matrix(box, np.array(boxes)).max() > params.max_mutual_iou:
                continue
            visible = [mk & ~m for mk in masks]
            if any(v.sum() < 0.6 * mk.sum() for v, mk in zip(visible, masks)):
                continue
            masks = visible + [m]
            classes.append(cls)
            boxes = [mask_to_box(mk) for mk in masks[:-1]] + [box]
            break
    for cls, m in zip(classes, masks):
        for _attempt in range(100):
            color = rng.random(3)
            if np.linalg.norm(color - base) >= params.min_contrast:
                break
        img[:, m] = color[:, None]
    img = img + params.pixel_noise * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    labels = np.zeros(NUM_CLASSES)
    instances = []
    for cls, m in zip(classes, masks):
        labels[cls - 1] = 1.0
        instances.append(Instance(cls, mask_to_box(m), m))
    return Sample(img, labels, instances, name)


def gen_synthetic(n, seed, params=SynthParams(), split="train"):
    if n < 1:
        raise ValueError("n must be >= 1")
    sid = SPLIT_IDS.get(split, 2)
    return [make_sample(make_rng(seed, 7, sid, i), params, name=f"{split}_{i:04d}") for i in range(n)]


def rle_encode(mask):
    """Row-major run lengths alternating background/foreground, starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    if flat.size and flat[0]:
        runs.append(0)
    runs.extend(int(b - a) for a, b in zip(edges[:-1], edges[1:]))
    return runs


def rle_decode(runs, height, width):
    flat = np.zeros(height * width, dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    if pos != height * width:
        raise ValueError(f"rle covers {pos} pixels, expected {height * width}")
    return flat.reshape(height, width)


def image_to_uint8(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_dataset(samples, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:04d}.png"
        Image.fromarray(image_to_uint8(s.image)).save(out / rel, optimize=False)
        lines.append(json.dumps({
            "image": rel,
            "labels": [int(v) for v in s.labels],
            "instances": [{"class": int(ins.cls), "box": [float(v) for v in ins.box], "mask_rle": rle_encode(ins.mask)}
                          for ins in s.instances],
        }))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_dataset(data_dir):
    root = Path(data_dir)
    samples = []
    for line in (root / "annotations.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = load_image(root / rec["image"])
        h, w = img.shape[1:]
        inst = [Instance(int(d["class"]), np.asarray(d["box"], dtype=np.float64), rle_decode(d["mask_rle"], h, w))
                for d in rec.get("instances", [])]
        samples.append(Sample(img, np.asarray(rec["labels"], dtype=np.float64), inst, rec["image"]))
    return samples
