"""Command-line entry point: gen-data, train, infer, eval, dump-maps."""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .boxes import pixel_span
from .calibration import calibrate_mil
from .config import Config, load_config, parse_value
from .data import CLASS_NAMES, gen_synthetic, image_to_uint8, load_dataset, load_image, rle_encode, save_dataset
from .metrics import EvalReport
from .model import STAGES, Model
from .pipeline import (TrainLog, calibration_settings, compute_proposals, evaluate_stage, instance_predictions,
                       regenerate_stores, report_dict, run_cascade_pretrain, run_forward_backward)
from .proposals import ProposalParams, generate_proposals

log = logging.getLogger("weakseg")

PALETTE = np.array([[0, 0, 0], [230, 60, 60], [60, 180, 75], [60, 110, 230], [240, 200, 40], [170, 70, 200]],
                   dtype=np.float64)
MASK_ALPHA = 0.4
METRIC_NAMES = ("map", "corloc", "miou", "map_r", "abo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="weakseg", description="Weakly supervised instance segmentation on synthetic shapes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file (or a run.json)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--n", type=int, default=500, help="training images")
    g.add_argument("--n-test", type=int, help="test images (default n/5)")

    t = sub.add_parser("train", help="cascaded pre-training or forward-backward learning")
    common(t)
    t.add_argument("--data")
    t.add_argument("--stage", choices=("cascade", "fb"), default="cascade")
    t.add_argument("--ckpt", help="cascade checkpoint (required for --stage fb)")
    t.add_argument("--dump-maps", help="write calibration maps of the first training images here")

    i = sub.add_parser("infer", help="predict instances for images")
    common(i)
    i.add_argument("--ckpt")
    i.add_argument("--image", action="append", default=[])
    i.add_argument("--data")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e)
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--metrics", help="comma list of " + ",".join(METRIC_NAMES))
    e.add_argument("--eval-stage", choices=STAGES, default="seg")

    d = sub.add_parser("dump-maps", help="write calibration debug maps as PNG")
    common(d)
    d.add_argument("--ckpt")
    d.add_argument("--image", action="append", default=[])
    d.add_argument("--data")
    d.add_argument("--dump-maps", help="output directory (defaults to --out)")
    return p


# ---------------------------------------------------------------- helpers

def _resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    path = args.config
    if path and not Path(path).exists():
        raise UsageError(f"--config: no such file {path}")
    if path and path.endswith(".json"):
        rec = json.loads(Path(path).read_text())
        base = {k: parse_value(k, v if isinstance(v, str) else _json_to_text(v)) for k, v in rec["config"].items()}
        cfg = Config().replace(**base)
        return cfg.replace(**{k: parse_value(k, v) if isinstance(v, str) else v for k, v in overrides.items()})
    return load_config(path, overrides)


def _json_to_text(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _need(args, name, flag):
    value = getattr(args, name, None)
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _need_path(args, name, flag):
    value = _need(args, name, flag)
    if not Path(value).exists():
        raise UsageError(f"{flag}: no such path {value}")
    return value


def _version():
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_run_json(out, args, cfg):
    rec = {"verb": args.verb, "argv": sys.argv[1:], "seed": cfg.seed, "version": _version(),
           "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.as_dict().items()}}
    (Path(out) / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    out = Path(_need(args, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(data, name):
    root = Path(data)
    if (root / name / "annotations.jsonl").exists():
        return load_dataset(root / name)
    if (root / "annotations.jsonl").exists():
        return load_dataset(root)
    return None


def _load_model(args, cfg):
    ckpt = _need_path(args, "ckpt", "--ckpt")
    path = Path(ckpt)
    if path.is_dir():
        path = path / "model.ckpt"
    model = Model(cfg)
    model.load(path)
    return model


def overlay(image, instances):
    """Class-coloured translucent masks and 1-px box outlines over the image (uint8 HxWx3)."""
    canvas = image_to_uint8(image).astype(np.float64)
    h, w = canvas.shape[:2]
    for ins in instances:
        col = PALETTE[ins["class"] % len(PALETTE)]
        m = ins["mask"] >= 0.5
        canvas[m] = (1 - MASK_ALPHA) * canvas[m] + MASK_ALPHA * col
    for ins in instances:
        col = PALETTE[ins["class"] % len(PALETTE)]
        x0, y0, x1, y1 = pixel_span(ins["box"], h, w)
        if x1 <= x0 or y1 <= y0:
            continue
        canvas[y0, x0:x1] = col
        canvas[y1 - 1, x0:x1] = col
        canvas[y0:y1, x0] = col
        canvas[y0:y1, x1 - 1] = col
    return np.round(canvas).astype(np.uint8)


def _save_map(path, m):
    m = np.clip(np.asarray(m, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(m * 255).astype(np.uint8), mode="L").save(path)


def dump_maps(model, image, proposals, cfg, out_dir, stem, labels=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = [c + 1 for c in range(model.num_classes)] if labels is None else \
        [c + 1 for c in np.nonzero(np.asarray(labels) > 0)[0]]
    maps = {}
    calibrate_mil(model["cls"], model.features(image), image, proposals, classes, calibration_settings(cfg),
                  labels=labels, maps=maps)
    written = []
    for key, val in maps.items():
        if key == "background":
            p = out / f"{stem}_background.png"
            _save_map(p, val)
            written.append(p)
            continue
        for kind, m in val.items():
            p = out / f"{stem}_{CLASS_NAMES[key - 1]}_{kind}.png"
            _save_map(p, m)
            written.append(p)
    return written


# ---------------------------------------------------------------- verbs

def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 5)
    if args.n < 1 or n_test < 1:
        raise UsageError("--n must be >= 1")
    save_dataset(gen_synthetic(args.n, cfg.seed, split="train"), out / "train")
    save_dataset(gen_synthetic(n_test, cfg.seed, split="test"), out / "test")
    log.info("wrote %d train / %d test images to %s", args.n, n_test, out)
    return 0


def cmd_train(args, cfg):
    if args.stage == "fb":
        _need(args, "ckpt", "--ckpt")
    data = _need_path(args, "data", "--data")
    if args.stage == "fb":
        _need_path(args, "ckpt", "--ckpt")
    out = _out_dir(args)
    train = _split(data, "train")
    if not train:
        raise UsageError(f"--data: no annotations.jsonl under {data}")
    test = _split(data, "test") if (Path(data) / "test").exists() else None
    _write_run_json(out, args, cfg)
    tlog = TrainLog(out / "train_log.csv")
    t0 = time.perf_counter()
    train_props = compute_proposals(train, cfg, 0)
    test_props = compute_proposals(test, cfg, 1) if test else None
    metrics = {}
    try:
        if args.stage == "cascade":
            model = Model(cfg)
            res = run_cascade_pretrain(model, train, cfg, tlog, test, train_props, test_props)
            stage_dir = out / "cascade"
            stage_dir.mkdir(exist_ok=True)
            model.save(stage_dir / "backbone.ckpt", stages=(), backbone=True)
            for s in STAGES:
                model.save(stage_dir / f"{s}.ckpt", stages=(s,), backbone=False)
            for s, store in res.stores.items():
                store.to_jsonl(out / f"pseudo_{s}.jsonl", [t.name for t in train])
            metrics["stage_map"] = {s: r.map for s, r in res.reports.items()}
            metrics["reports"] = {s: report_dict(r) for s, r in res.reports.items()}
            metrics["backbone_frozen"] = res.backbone_hash_before == res.backbone_hash_after
        else:
            model = _load_model(args, cfg)
            stores = regenerate_stores(model, train, train_props, cfg, {})
            run_forward_backward(model, train, stores, cfg, tlog, train_props)
            if test:
                rep, _ = evaluate_stage(model, "seg", test, test_props, cfg)
                metrics["reports"] = {"fb": report_dict(rep)}
                metrics["stage_map"] = {"fb": rep.map}
        model.save(out / "model.ckpt")
        if args.dump_maps:
            for i, s in enumerate(train[:8]):
                dump_maps(model, s.image, train_props[i], cfg, args.dump_maps, f"train_{i:04d}", s.labels)
    finally:
        tlog.close()
    metrics["wall_s"] = time.perf_counter() - t0
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("training done in %.1fs", metrics["wall_s"])
    return 0


def _predict(model, image, cfg):
    feat = model.features(image)
    return instance_predictions(model["seg"], image, cfg, feat)


def cmd_infer(args, cfg):
    model = _load_model(args, cfg)
    out = _out_dir(args)
    items = []
    for path in args.image:
        if not Path(path).exists():
            raise UsageError(f"--image: no such file {path}")
        items.append((path, load_image(path)))
    if args.data:
        split = _split(_need_path(args, "data", "--data"), "test") or []
        items += [(s.name, s.image) for s in split]
    if not items:
        raise UsageError("--image or --data is required")
    _write_run_json(out, args, cfg)
    with open(out / "predictions.jsonl", "w") as f:
        for k, (name, image) in enumerate(items):
            hyps = _predict(model, image, cfg)
            rec = {"image": str(name), "instances": [
                {"class": h.cls, "box": [float(v) for v in h.box], "score": h.score, "mask_rle": rle_encode(h.mask >= 0.5)}
                for h in hyps]}
            f.write(json.dumps(rec) + "\n")
            vis = overlay(image, [{"class": h.cls, "box": h.box, "mask": h.mask} for h in hyps])
            Image.fromarray(vis).save(out / f"overlay_{k:04d}.png")
    log.info("wrote predictions for %d images to %s", len(items), out)
    return 0


def cmd_eval(args, cfg):
    wanted = METRIC_NAMES
    if args.metrics:
        wanted = tuple(m.strip().lower() for m in args.metrics.split(",") if m.strip())
        bad = [m for m in wanted if m not in METRIC_NAMES]
        if bad:
            raise UsageError(f"--metrics: unknown metric(s) {','.join(bad)}")
    data = _need_path(args, "data", "--data")
    model = _load_model(args, cfg)
    out = _out_dir(args)
    split = _split(data, "test")
    if not split:
        raise UsageError(f"--data: no annotations.jsonl under {data}")
    _write_run_json(out, args, cfg)
    props = compute_proposals(split, cfg, 1)
    full, _ = evaluate_stage(model, args.eval_stage, split, props, cfg)
    rep = EvalReport(CLASS_NAMES)
    if "map" in wanted:
        rep.ap, rep.map = full.ap, full.map
    if "corloc" in wanted:
        rep.corloc, rep.mcorloc = full.corloc, full.mcorloc
    if "miou" in wanted:
        rep.iou, rep.miou = full.iou, full.miou
    if "map_r" in wanted:
        rep.map_r = full.map_r
    if "abo" in wanted:
        rep.abo = full.abo
    (out / "eval.csv").write_text(rep.to_csv())
    (out / "eval.txt").write_text(rep.pretty() + "\n")
    print(rep.pretty())
    return 0


def cmd_dump_maps(args, cfg):
    model = _load_model(args, cfg)
    target = args.dump_maps or _need(args, "out", "--out")
    Path(target).mkdir(parents=True, exist_ok=True)
    items = []
    for path in args.image:
        if not Path(path).exists():
            raise UsageError(f"--image: no such file {path}")
        items.append((Path(path).stem, load_image(path), None))
    if args.data:
        split = _split(_need_path(args, "data", "--data"), "test") or []
        items += [(Path(s.name).stem, s.image, s.labels) for s in split[:8]]
    if not items:
        raise UsageError("--image or --data is required")
    params = ProposalParams(cap=cfg.proposal_cap)
    for k, (stem, image, labels) in enumerate(items):
        props = generate_proposals(image, params, cfg.seed, (3, k)).boxes
        dump_maps(model, image, props, cfg, target, stem, labels)
    return 0


VERBS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
         "dump-maps": cmd_dump_maps}


def main(argv=None):
    level = os.environ.get("WEAKSEG_LOG", "info").lower()
    logging.basicConfig(level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.INFO), format="%(asctime)s %(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args)
    except UsageError as e:
        print(f"weakseg: usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # bad config values
        print(f"weakseg: usage error: {e}", file=sys.stderr)
        return 1
    try:
        return VERBS[args.verb](args, cfg)
    except UsageError as e:
        print(f"weakseg: usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"weakseg: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
