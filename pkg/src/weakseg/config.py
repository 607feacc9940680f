"""Flat ``key = value`` run configuration with typed fields and command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .nn import ConfigurationError


@dataclass
class Config:
    seed: int = 42
    threads: int = 1
    # backbone pretraining on a separate single-object classification set (image labels only)
    pretrain_images: int = 2000
    pretrain_iters: int = 800
    pretrain_batch: int = 8
    pretrain_lr: float = 0.01
    # cascade schedule
    cls_iters: int = 2000
    det_iters: int = 2000
    refine_iters: int = 2000
    seg_iters: int = 2000
    batch_size: int = 2
    lr: float = 0.001
    lr_final: float = 0.0001
    lr_drop_at: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # forward-backward learning
    fb_iters: int = 400
    fb_lr: float = 0.0001
    refresh_interval: int = 0
    bv_interval: int = 1
    beta: float = 0.5
    bg_iou: float = 0.1
    # boxes, proposals, detection
    proposal_cap: int = 300
    calib_nms: float = 0.3
    det_nms: float = 0.5
    rpn_nms: float = 0.7
    rpn_post_nms: int = 100
    score_threshold: float = 0.05
    mask_rois: int = 8
    pseudo_min_score: float = 0.2
    pseudo_max_per_class: int = 3
    anchor_scales: tuple = (8.0, 16.0, 32.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    # dense CRF
    crf_w_appearance: float = 4.0
    crf_w_smoothness: float = 3.0
    crf_theta_alpha: float = 8.0
    crf_theta_beta: float = 0.1
    crf_theta_gamma: float = 3.0
    crf_iterations: int = 5
    crf_margin: float = 8.0
    # augmentation
    aug_scales: tuple = (56, 64, 80)
    aug_flip: bool = True
    # evaluation
    eval_stages: bool = True
    extra: dict = field(default_factory=dict, repr=False)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _field_types():
    defaults = Config()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(Config) if f.name != "extra"}, defaults


def parse_value(key, text):
    types, defaults = _field_types()
    if key not in types:
        raise ConfigurationError(f"unknown config key '{key}'")
    kind = types[key]
    text = str(text).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            elem = type(getattr(defaults, key)[0])
            return tuple(elem(x.strip()) for x in text.split(",") if x.strip())
        return kind(text)
    except ValueError as e:
        raise ConfigurationError(f"bad value for '{key}': {text!r}") from e


def parse_text(text):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or raw strings)."""
    cfg = Config()
    values = {}
    if path:
        with open(path) as f:
            values.update(parse_text(f.read()))
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    return cfg.replace(**values)
