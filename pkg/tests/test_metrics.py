import numpy as np
import pytest

from weakseg.data import Instance
from weakseg.metrics import (EvalReport, abo, average_precision, corloc, gt_semantic_map, map_r, miou,
                             proposal_recall, semantic_map, voc_map)
from weakseg.nn import make_rng


def gt(cls, box, hw=16):
    m = np.zeros((hw, hw), dtype=bool)
    x0, y0, x1, y1 = (int(v) for v in box)
    m[y0:y1, x0:x1] = True
    return Instance(cls, np.asarray(box, dtype=float), m)


def test_ap_identical_detections_and_empty():
    gts = [[gt(1, [0, 0, 4, 4]), gt(2, [5, 5, 9, 9])], [gt(1, [2, 2, 8, 8])]]
    preds = [[(g.cls, g.box, s) for g, s in zip(im, (0.3, 0.9))] for im in gts]
    aps, m = voc_map(preds, gts, num_classes=3)
    assert np.array_equal(aps[:2], [1.0, 1.0]) and np.isnan(aps[2]) and m == 1.0
    aps, m = voc_map([[], []], gts, num_classes=3)
    assert aps[0] == 0 and m == 0


def test_ap_hand_pr_envelope():
    gts = [[gt(1, [0, 0, 4, 4]), gt(1, [8, 8, 12, 12])]]
    preds = [[(1, np.array([0, 0, 4, 4.0]), 0.9), (1, np.array([13, 0, 16, 3.0]), 0.8),
              (1, np.array([8, 8, 12, 12.0]), 0.7)]]
    # ranked TP, FP, TP: recall 1/2, 1/2, 1; precision 1, 1/2, 2/3; envelope area 1/2 * 1 + 1/2 * 2/3
    assert abs(voc_map(preds, gts, num_classes=1)[1] - (0.5 + 1 / 3)) < 1e-15
    assert abs(average_precision([1, 0, 1], 2) - 5 / 6) < 1e-15
    assert np.isnan(average_precision([0, 0], 0))


def test_duplicate_detection_is_forced_false_positive():
    rng = make_rng(1)
    for _ in range(20):
        gts, preds = random_case(rng)
        base = voc_map(preds, gts)[1]
        img = int(rng.integers(len(preds)))
        if not preds[img]:
            continue
        d = preds[img][int(rng.integers(len(preds[img])))]
        dup = [list(p) for p in preds]
        dup[img].append((d[0], d[1].copy(), d[2]))
        assert voc_map(dup, gts)[1] <= base + 1e-12


def random_case(rng, n_img=6):
    gts, preds = [], []
    for _ in range(n_img):
        g = []
        for _ in range(int(rng.integers(1, 4))):
            xy = rng.uniform(0, 40, 2)
            g.append(gt(int(rng.integers(1, 4)), np.concatenate([xy, xy + rng.uniform(6, 20, 2)]), hw=64))
        gts.append(g)
        p = []
        for _ in range(int(rng.integers(0, 6))):
            src = g[int(rng.integers(len(g)))]
            box = src.box + rng.normal(0, 3, 4)
            box[2:] = np.maximum(box[2:], box[:2] + 1)
            cls = src.cls if rng.random() < 0.8 else int(rng.integers(1, 4))
            p.append((cls, box, float(rng.random())))
        preds.append(p)
    return gts, preds


def test_map_monotone_in_threshold_and_permutation_invariant():
    rng = make_rng(2)
    for _ in range(30):
        gts, preds = random_case(rng)
        vals = [voc_map(preds, gts, t)[1] for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        perm = rng.permutation(len(gts))
        shuffled = voc_map([preds[i][::-1] for i in perm], [gts[i] for i in perm])[1]
        assert abs(shuffled - vals[2]) < 1e-12


def test_corloc_cases():
    gts = [[gt(1, [0, 0, 8, 8])], [gt(1, [2, 2, 10, 10]), gt(2, [0, 0, 4, 4])]]
    exact = [[(1, g.box, 1.0) for g in im] for im in gts]
    exact[1].append((2, gts[1][1].box, 1.0))
    per, mean = corloc(exact, gts)
    assert per[0] == 1.0 and per[1] == 1.0 and np.isnan(per[2]) and mean == 1.0
    far = [[(1, np.array([12, 12, 16, 16.0]), 1.0)], [(1, np.array([12, 12, 16, 16.0]), 1.0)]]
    assert corloc(far, gts)[0][0] == 0.0
    # IoU exactly 0.5 is not localized: [0,0,8,8] vs [0,0,8,4]
    half = [[(1, np.array([0, 0, 8, 4.0]), 1.0)], []]
    assert corloc(half, gts)[0][0] == 0.0
    # only the top-scoring candidate counts
    top = [[(1, np.array([12, 12, 16, 16.0]), 0.9), (1, np.array([0, 0, 8, 8.0]), 0.8)], []]
    assert corloc(top, gts)[0][0] == 0.0


def test_miou_cases():
    g = np.array([[0, 1], [0, 1]])
    assert np.all(miou([g], [g], 3)[0][~np.isnan(miou([g], [g], 3)[0])] == 1)
    per, _ = miou([np.zeros((2, 2), dtype=int)], [g], 3)
    assert per[1] == 0
    per, mean = miou([np.array([[0, 1], [1, 1]])], [g], 3)
    assert per[0] == 0.5 and abs(per[1] - 2 / 3) < 1e-15 and np.isnan(per[2])
    assert abs(mean - (0.5 + 2 / 3) / 2) < 1e-15


def test_semantic_flattening_uses_highest_score():
    a = np.zeros((4, 4))
    a[:, :3] = 0.9
    b = np.zeros((4, 4))
    b[:, 1:] = 0.7
    sem = semantic_map([(1, a, 0.4), (2, b, 0.8)], 4, 4)
    assert np.array_equal(sem[0], [1, 2, 2, 2])
    assert np.array_equal(gt_semantic_map([gt(3, [0, 0, 2, 2], hw=4)], 4, 4)[:2, :2], [[3, 3], [3, 3]])


def test_mask_ap_threshold_logic_and_abo():
    g = gt(1, [0, 0, 5, 2], hw=8)  # 10 pixels
    m = np.zeros((8, 8))
    m[0, :5] = 1
    m[1, :1] = 1  # 6 of the 10 pixels, nothing extra: IoU 0.6
    r = map_r([[(1, m, 0.9)]], [[g]], num_classes=1)
    assert r == {0.25: 1.0, 0.5: 1.0, 0.75: 0.0}
    assert abs(abo([[(1, m, 0.9)]], [[g]]) - 0.6) < 1e-15
    perfect = map_r([[(1, g.mask.astype(float), 0.5)]], [[g]], num_classes=1)
    assert all(v == 1.0 for v in perfect.values())
    assert abo([[(1, g.mask.astype(float), 0.5)]], [[g]]) == 1.0
    assert all(v == 0.0 for v in map_r([[]], [[g]], num_classes=1).values())
    assert abo([[]], [[g]]) == 0.0


def test_report_csv_and_pretty():
    rep = EvalReport(("a", "b"), ap=np.array([0.5, np.nan]), map=0.5, corloc=np.array([1.0, 0.0]), mcorloc=0.5,
                     iou=np.array([0.9, 0.4, 0.2]), miou=0.5, map_r={0.5: 0.3}, abo=0.6)
    lines = rep.to_csv().strip().splitlines()
    assert lines[0].split(",")[:4] == ["class", "ap", "corloc", "iou"]
    assert len(lines) == 1 + 2 + 1 + 1
    assert "0.500000" in lines[-1]
    text = rep.pretty()
    assert "mAP 0.5000" in text and "background" in text
    for row in text.splitlines()[1:4]:
        assert "  " in row  # columns separated


def test_proposal_recall_against_scalar_oracle():
    rng = make_rng(3)
    gts, _ = random_case(rng, n_img=10)
    props = []
    for g in gts:
        xy = rng.uniform(0, 50, (30, 2))
        props.append(np.concatenate([xy, xy + rng.uniform(3, 25, (30, 2))], axis=1))
    hit = total = 0
    for ps, g in zip(props, gts):
        for inst in g:
            total += 1
            best = 0.0
            for b in ps:
                iw = max(0.0, min(b[2], inst.box[2]) - max(b[0], inst.box[0]))
                ih = max(0.0, min(b[3], inst.box[3]) - max(b[1], inst.box[1]))
                u = (b[2] - b[0]) * (b[3] - b[1]) + (inst.box[2] - inst.box[0]) * (inst.box[3] - inst.box[1]) - iw * ih
                best = max(best, iw * ih / u)
            hit += best >= 0.5
    assert proposal_recall(props, gts) == hit / total
    assert proposal_recall([np.array([g.box for g in im]) for im in gts], gts) == 1.0
