import json

import pytest

from weakseg.cli import main

FAST = ["--set", "pretrain_iters=0", "--set", "proposal_cap=60", "--set", "crf_iterations=2",
        "--set", "pseudo_min_score=0.5"]
ITERS = [f"--set={s}_iters=3" for s in ("cls", "det", "refine", "seg")]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "run.json"}


def test_gen_data_byte_identical(tmp_path):
    assert main(["gen-data", "--n", "6", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--n", "6", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "test/annotations.jsonl" in a and "train/images/0005.png" in a
    assert len((tmp_path / "a" / "test" / "annotations.jsonl").read_text().splitlines()) == 1


@pytest.mark.parametrize("argv, needle", [
    (["train", "--stage", "fb", "--data", "x", "--out", "y"], "--ckpt"),
    (["gen-data", "--bogus"], "unrecognized"),
    (["frobnicate"], "invalid choice"),
    (["gen-data", "--set", "nope=1", "--out", "z"], "nope"),
    (["eval", "--metrics", "map,bleu", "--data", "x", "--ckpt", "y", "--out", "z"], "bleu"),
])
def test_usage_errors_exit_one(argv, needle, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert needle in capsys.readouterr().err


def test_end_to_end_smoke(tmp_path, capsys):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    assert main(["gen-data", "--n", "4", "--n-test", "2", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run)] + FAST + ITERS) == 0
    for name in ("model.ckpt", "metrics.json", "train_log.csv", "run.json", "cascade/seg.ckpt", "pseudo_cls.jsonl"):
        assert (run / name).exists(), name
    assert main(["eval", "--data", str(data), "--ckpt", str(run), "--out", str(ev)] + FAST) == 0
    rows = (ev / "eval.csv").read_text().strip().splitlines()
    summary = dict(r.split(",")[:2] for r in rows[1:] if not r.startswith(("circle", "square", "triangle")))
    vals = [float(v) for v in summary.values() if v not in ("", "nan")]
    assert vals and all(0.0 <= v <= 1.0 for v in vals)
    assert main(["infer", "--ckpt", str(run), "--data", str(data), "--out", str(tmp_path / "inf")] + FAST) == 0
    preds = [json.loads(l) for l in (tmp_path / "inf" / "predictions.jsonl").read_text().splitlines()]
    assert len(preds) == 2 and list((tmp_path / "inf").glob("overlay_*.png"))

    # a run.json replays the same configuration
    rj = json.loads((run / "run.json").read_text())
    assert rj["verb"] == "train" and rj["config"]["cls_iters"] == 3 and rj["seed"] == 42
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "again"), "--config", str(run / "run.json")]) == 0
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == (run / "model.ckpt").read_bytes()
