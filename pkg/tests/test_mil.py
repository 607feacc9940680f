import math

import numpy as np
import pytest

from helpers import numeric_grad, rel_error
from weakseg.data import gen_synthetic
from weakseg.mil import (InvalidLabelError, MilModule, aggregate_scores, mil_backward, mil_loss, normalize_weights,
                         proposal_class_loss)
from weakseg.nn import backbone_net, make_rng


def test_normalize_weights_closed_forms():
    assert np.allclose(normalize_weights(np.full((4, 2), 3.0)), 0.25, rtol=0, atol=1e-15)
    assert np.array_equal(normalize_weights(np.array([[5.0, -2.0]])), [[1.0, 1.0]])
    w = normalize_weights(np.array([[0.0], [math.log(2)]]))
    assert np.allclose(w[:, 0], [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_weight_columns_sum_to_one():
    rng = make_rng(1)
    for _ in range(50):
        w = normalize_weights(rng.standard_normal((int(rng.integers(1, 40)), 3)) * 20)
        assert np.max(np.abs(w.sum(axis=0) - 1)) <= 1e-9


def test_aggregate_cases():
    pred = aggregate_scores(np.zeros((5, 3)), normalize_weights(np.zeros((5, 3))))
    assert np.array_equal(pred.s, np.zeros(3))
    assert np.allclose(pred.p_hat, 1 / 3, atol=1e-15)
    x_c = np.zeros((1, 3))
    x_c[0, 1] = 2.5
    assert aggregate_scores(x_c, np.ones((1, 3))).s[1] == 2.5
    x_c = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]])
    w_p = np.array([[0.2, 0.5], [0.3, 0.25], [0.5, 0.25]])
    s = aggregate_scores(x_c, w_p).s
    assert np.allclose(s, [1 * 0.2 + 3 * 0.3 + 0.5 * 0.5, 2 * 0.5 - 1 * 0.25 + 4 * 0.25], rtol=0, atol=1e-15)


def test_mil_loss_closed_forms():
    class P:
        pass

    p = P()
    p.p_hat = np.array([0.0, 1.0, 0.0])
    assert mil_loss(p, [0, 1, 0])[0] == 0.0
    p.p_hat = np.full(3, 1 / 3)
    assert abs(mil_loss(p, [1, 0, 0])[0] - math.log(3)) < 1e-12
    p.p_hat = np.array([0.5, 0.3, 0.2])
    assert abs(mil_loss(p, [1, 1, 0])[0] - 1.8971199848858813) < 1e-12
    with pytest.raises(InvalidLabelError):
        mil_loss(p, [0, 0, 0])


def test_proposal_class_loss_cases():
    assert proposal_class_loss(np.zeros((3, 4)), [0, 2, 3])[0] == pytest.approx(math.log(4), abs=1e-12)
    big = np.array([[0.0, 60.0, 0.0, 0.0]])
    assert proposal_class_loss(big, [1])[0] < 1e-20
    assert proposal_class_loss(np.ones((2, 4)), [-1, -1])[0] == 0.0
    logits = np.array([[1.0, 2.0, 0.0, -1.0], [0.5, 0.5, 3.0, 0.0]])
    lse = np.log(np.exp(logits).sum(axis=1))
    hand = ((lse[0] - logits[0, 1]) + (lse[1] - logits[1, 0])) / 2
    assert proposal_class_loss(logits, [1, 0])[0] == pytest.approx(hand, abs=1e-12)


def mil_objective(x_c, x_p, y):
    return mil_loss(aggregate_scores(x_c, normalize_weights(x_p)), y)[0]


def test_mil_gradients_vs_finite_differences():
    rng = make_rng(2)
    for _ in range(20):
        r = int(rng.integers(1, 8))
        x_c, x_p = rng.standard_normal((r, 3)), rng.standard_normal((r, 3))
        y = (rng.random(3) < 0.5).astype(float)
        y[int(rng.integers(3))] = 1
        pred = aggregate_scores(x_c, normalize_weights(x_p))
        _, ds = mil_loss(pred, y)
        dx_c, dx_p = mil_backward(x_c, pred, ds)
        assert rel_error(dx_c, numeric_grad(lambda: mil_objective(x_c, x_p, y), x_c)) < 1e-5
        assert rel_error(dx_p, numeric_grad(lambda: mil_objective(x_c, x_p, y), x_p)) < 1e-5


def test_proposal_class_loss_gradient():
    rng = make_rng(3)
    for _ in range(20):
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(-1, 4, size=5)
        labels[0] = 2
        _, g = proposal_class_loss(logits, labels)
        assert rel_error(g, numeric_grad(lambda: proposal_class_loss(logits, labels)[0], logits)) < 1e-5


def test_column_shift_invariance():
    rng = make_rng(4)
    x_c, x_p = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    shifted = x_p + np.array([3.0, -7.0, 100.0])
    a = aggregate_scores(x_c, normalize_weights(x_p))
    b = aggregate_scores(x_c, normalize_weights(shifted))
    assert np.max(np.abs(a.w - b.w)) <= 1e-12
    assert np.max(np.abs(a.s - b.s)) <= 1e-12
    assert np.max(np.abs(a.p_hat - b.p_hat)) <= 1e-12
    y = [1, 0, 1]
    assert abs(mil_objective(x_c, x_p, y) - mil_objective(x_c, shifted, y)) <= 1e-12


def test_single_proposal_reduces_to_plain_classification():
    x_c = np.array([[0.3, -1.2, 2.0]])
    assert np.array_equal(aggregate_scores(x_c, normalize_weights(np.array([[9.0, -3.0, 0.0]]))).s, x_c[0])


def test_module_backward_reaches_features():
    rng = make_rng(5)
    s = gen_synthetic(1, 3)[0]
    feat = backbone_net(rng)(s.image[None])
    mod = MilModule(3, rng)
    rois = np.array([[0, 0, 32, 32], [10, 10, 50, 60], [20, 5, 60, 40]], dtype=float)
    mod.zero_grad()
    loss, dfeat = mod.loss_and_backward(feat, rois, s.labels, proposal_labels=[0, 1, -1])
    assert np.isfinite(loss) and dfeat.shape == feat.shape
    x_c, pred = mod.predict(feat, rois)
    assert x_c.shape == (3, 4)
    assert abs(pred.p_hat.sum() - 1) < 1e-12
