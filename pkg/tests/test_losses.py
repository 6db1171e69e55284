import math

import numpy as np
import pytest

import gradcheck
from olseg.autodiff import Tensor, softmax
from olseg.losses import IGNORE, GroundTruth, LossWeights, line_ce, line_l1, mask_ce, smooth_l1, total_loss


def random_truth(rng, n=2, h=12, w=7, s=5, invalid=0.2):
    rows = np.sort(rng.uniform(0, h - 1, (n, s, w)), axis=1)
    valid = rng.random((n, s, w)) > invalid
    labels = rng.integers(0, s + 1, (n, h, w))
    labels[rng.random((n, h, w)) < 0.1] = IGNORE
    return GroundTruth(labels, rows, valid)


def random_probs(rng, shape, axis):
    return softmax(Tensor(rng.standard_normal(shape) * 2), axis=axis).data


# -- loop oracles ------------------------------------------------------------------------------

def mask_ce_loop(p, labels):
    total, count = 0.0, 0
    for idx in np.ndindex(labels.shape):
        c = labels[idx]
        if c == IGNORE:
            continue
        total -= math.log(max(p[idx + (c,)], 1e-12))
        count += 1
    return total / count


def line_ce_loop(p, rows, valid):
    n, h, w, s = p.shape
    groups = []
    for i in range(n):
        for k in range(s):
            terms = [-math.log(max(p[i, min(max(int(np.rint(rows[i, k, u])), 0), h - 1), u, k], 1e-12))
                     for u in range(w) if valid[i, k, u]]
            if terms:
                groups.append(sum(terms) / len(terms))
    return sum(groups) / len(groups)


def line_l1_loop(pred, rows, valid):
    def ell(d):
        return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5

    groups = []
    for i in range(pred.shape[0]):
        for k in range(pred.shape[1]):
            terms = [ell(pred[i, k, u] - rows[i, k, u]) for u in range(pred.shape[2]) if valid[i, k, u]]
            if terms:
                groups.append(sum(terms) / len(terms))
    return sum(groups) / len(groups)


# -- mask_ce ----------------------------------------------------------------------------------

def test_mask_ce_perfect_prediction_is_zero(rng):
    labels = rng.integers(0, 6, (2, 5, 4))
    p = np.eye(6)[labels]
    assert mask_ce(p, GroundTruth(labels, np.zeros((2, 5, 4)), np.ones((2, 5, 4)))).item() == 0.0


def test_mask_ce_uniform_is_log6(rng):
    labels = rng.integers(0, 6, (3, 8, 9))
    p = np.full((3, 8, 9, 6), 1 / 6)
    value = mask_ce(p, GroundTruth(labels, np.zeros((3, 5, 9)), np.ones((3, 5, 9)))).item()
    assert abs(value - math.log(6)) < 1e-9


def test_mask_ce_matches_loop(rng):
    for _ in range(5):
        gt = random_truth(rng)
        p = random_probs(rng, (2, 12, 7, 6), -1)
        assert abs(mask_ce(p, gt).item() - mask_ce_loop(p, gt.class_map)) < 1e-9


def test_mask_ce_clamps_zero_probability():
    labels = np.zeros((1, 1, 1), dtype=int)
    p = np.array([0.0, 1, 0, 0, 0, 0]).reshape(1, 1, 1, 6)
    assert mask_ce(p, GroundTruth(labels, np.zeros((1, 5, 1)), np.ones((1, 5, 1)))).item() == pytest.approx(-math.log(1e-12))


def test_mask_ce_errors(rng):
    gt = random_truth(rng)
    with pytest.raises(ValueError):
        mask_ce(np.full((2, 12, 8, 6), 1 / 6), gt)
    gt.class_map[:] = IGNORE
    with pytest.raises(ValueError):
        mask_ce(np.full((2, 12, 7, 6), 1 / 6), gt)


# -- line_ce ------------------------------------------------------------------------------------

def test_line_ce_one_hot_at_truth_is_zero(rng):
    gt = random_truth(rng, invalid=0.0)
    rows = np.rint(gt.boundary_rows).astype(int)
    p = np.zeros((2, 12, 7, 5))
    for i, k, u in np.ndindex(rows.shape):
        p[i, rows[i, k, u], u, k] = 1.0
    assert line_ce(p, gt).item() == 0.0


def test_line_ce_uniform_is_log_height():
    gt = GroundTruth(np.zeros((1, 128, 9), dtype=int), np.full((1, 5, 9), 40.3), np.ones((1, 5, 9)))
    assert abs(line_ce(np.full((1, 128, 9, 5), 1 / 128), gt).item() - math.log(128)) < 1e-9


def test_line_ce_matches_loop(rng):
    for _ in range(5):
        gt = random_truth(rng)
        p = random_probs(rng, (2, 12, 7, 5), 1)
        assert abs(line_ce(p, gt).item() - line_ce_loop(p, gt.boundary_rows, gt.valid)) < 1e-9


def test_line_ce_skips_invalid_columns(rng):
    gt = random_truth(rng, invalid=0.0)
    p = random_probs(rng, (2, 12, 7, 5), 1)
    before = line_ce(p, gt).item()
    gt.valid[0, 2, 3] = False
    p[0, :, 3, 2] = 1e-30  # garbage where the column is excluded
    p[0, 0, 3, 2] = 1.0
    assert line_ce(p, gt).item() != before
    assert abs(line_ce(p, gt).item() - line_ce_loop(p, gt.boundary_rows, gt.valid)) < 1e-9


def test_line_losses_need_a_valid_column(rng):
    gt = random_truth(rng)
    gt.valid[:] = False
    with pytest.raises(ValueError):
        line_ce(random_probs(rng, (2, 12, 7, 5), 1), gt)
    with pytest.raises(ValueError):
        line_l1(np.zeros((2, 5, 7)), gt)


# -- smooth_l1 and line_l1 -------------------------------------------------------------------------

@pytest.mark.parametrize("d,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-2.0, 1.5), (-0.5, 0.125)])
def test_smooth_l1_values(d, expected):
    assert smooth_l1(np.array([d])).data[0] == expected


def test_smooth_l1_continuous_at_one():
    eps = 1e-9
    left = smooth_l1(np.array([1 - eps])).data[0]
    right = smooth_l1(np.array([1 + eps])).data[0]
    assert abs(left - 0.5) < 2e-9 and abs(right - 0.5) < 2e-9


def test_smooth_l1_even_and_monotone():
    d = np.linspace(0, 5, 501)
    pos, neg = smooth_l1(d).data, smooth_l1(-d).data
    np.testing.assert_array_equal(pos, neg)
    assert np.all(np.diff(pos) >= 0)


def test_line_l1_perfect_and_offset(rng):
    gt = random_truth(rng)
    assert line_l1(gt.boundary_rows, gt).item() == 0.0
    assert line_l1(gt.boundary_rows + 0.5, gt).item() == pytest.approx(0.125, abs=1e-12)


def test_line_l1_matches_loop(rng):
    for _ in range(5):
        gt = random_truth(rng)
        pred = gt.boundary_rows + rng.normal(0, 2, gt.boundary_rows.shape)
        assert abs(line_l1(pred, gt).item() - line_l1_loop(pred, gt.boundary_rows, gt.valid)) < 1e-9


# -- total -------------------------------------------------------------------------------------------

def test_total_loss_examples():
    terms = [Tensor(np.array(v)) for v in (1.0, 2.0, 3.0)]
    assert total_loss(terms, LossWeights(0.5, 0.5, 1.0)).item() == 4.5
    assert total_loss(terms, LossWeights(1, 0, 0)).item() == 1.0
    assert total_loss([Tensor(np.array(0.0))] * 3).item() == 0.0


def test_total_loss_rejects_nan():
    with pytest.raises(FloatingPointError):
        total_loss([Tensor(np.array(1.0)), Tensor(np.array(np.nan)), Tensor(np.array(0.0))])


@pytest.mark.parametrize("w", [(0, 0, 0), (-1, 1, 1)])
def test_bad_weights(w):
    with pytest.raises(ValueError):
        LossWeights(*w)


def test_weight_scales_gradient_linearly(rng):
    gt = random_truth(rng)
    logits = rng.standard_normal((2, 12, 7, 5))
    grads = []
    for lam in (1.0, 3.0):
        x = Tensor(logits, requires_grad=True)
        p = softmax(x, axis=1)
        zero = Tensor(np.array(0.0))
        total_loss([zero, line_ce(p, gt), zero], LossWeights(1.0, lam, 1.0)).backward()
        grads.append(x.grad)
    np.testing.assert_allclose(grads[1], 3.0 * grads[0], rtol=1e-12)


# -- gradients ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", gradcheck.SEEDS)
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    gt = random_truth(rng, n=2, h=6, w=5)
    mask_logits = rng.standard_normal((2, 6, 5, 6))
    surf_logits = rng.standard_normal((2, 6, 5, 5))
    pred = gt.boundary_rows + rng.normal(0, 1.5, gt.boundary_rows.shape)
    # nudge away from the |d| = 1 kink
    d = pred - gt.boundary_rows
    pred[np.abs(np.abs(d) - 1) < 1e-3] += 0.01

    assert gradcheck.check(lambda x: mask_ce(softmax(x, -1), gt), [mask_logits], seed) < 1e-4
    assert gradcheck.check(lambda x: line_ce(softmax(x, 1), gt), [surf_logits], seed) < 1e-4
    assert gradcheck.check(lambda s: line_l1(s, gt), [pred], seed) < 1e-4
    # directly on probabilities; mild logits keep p well above the clamp and the FD step
    p = softmax(Tensor(rng.normal(0, 0.3, (2, 6, 5, 6))), axis=-1).data
    assert gradcheck.check(lambda q: mask_ce(q, gt), [p], seed) < 1e-4
    assert gradcheck.check(lambda q: smooth_l1(q), [rng.uniform(-3, 3, 20)], seed) < 1e-4
