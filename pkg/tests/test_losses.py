import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_box
from gradcheck import TOLERANCE, loss_cases, relative_error
from igmn.data_model import BoundingBox
from igmn.losses import (NonFiniteLossError, fused_loss, identity_prior_loss, relaxation,
                         relaxation_matrix, relaxed_bce, semantic_prior_loss, standard_bce,
                         total_loss)

LN2 = math.log(2.0)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def overlap_oracle(a, b):
    # area-by-rasterization free formula: clip both intervals explicitly
    left, right = max(a.x, b.x), min(a.x + a.w, b.x + b.w)
    top, bottom = max(a.y, b.y), min(a.y + a.h, b.y + b.h)
    inter = max(0.0, right - left) * max(0.0, bottom - top)
    return inter / (a.w * a.h + b.w * b.h - inter)


# -- relaxation --------------------------------------------------------------

def test_relaxation_single_actor_is_label():
    y = np.array([[1, 0, 1]])
    assert np.array_equal(relaxation(y, [BoundingBox(0, 0, 4, 4)], 0), y[0])


def test_relaxation_half_overlap_neighbour():
    # 1x3 boxes offset by one column share 2 of 4 covered units
    a, b = BoundingBox(0, 0, 1, 3), BoundingBox(1, 0, 1, 3)
    assert overlap_oracle(a, b) == pytest.approx(0.5)
    e = relaxation(np.array([[0, 0], [1, 0]]), [a, b], 0)
    assert e[0] == pytest.approx(0.5) and e[1] == 0


def test_relaxation_disjoint_is_label():
    y = np.array([[0, 1], [1, 1]])
    boxes = [BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 1, 1)]
    assert np.array_equal(relaxation_matrix(y, boxes), y)


def test_relaxation_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, c = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        boxes = [random_box(rng, 40) for _ in range(n)]
        y = rng.integers(0, 2, (n, c))
        expected = np.array([[max(overlap_oracle(boxes[i], boxes[j]) * y[j, k] for j in range(n))
                              for k in range(c)] for i in range(n)])
        got = relaxation_matrix(y, boxes)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
        assert (got >= y).all() and (got <= 1).all()


# -- BCE -----------------------------------------------------------------------

def test_relaxed_bce_hand_values():
    assert relaxed_bce(t([[0.5]]), [[1.0]], [[1.0]]).item() == pytest.approx(LN2, abs=1e-12)
    assert relaxed_bce(t([[0.5]]), [[0.0]], [[0.5]]).item() == pytest.approx(0.5 * LN2, abs=1e-12)


def test_standard_bce_hand_values():
    y = np.array([[1.0, 0.0, 1.0]])
    # only the clamp keeps each of the three terms from being exactly zero
    assert standard_bce(t(y), y).item() == pytest.approx(-3 * math.log1p(-1e-7), rel=1e-9)
    assert standard_bce(t([[0.5] * 4]), [[1, 0, 0, 1]], [1, 1, 0, 1]).item() == pytest.approx(3 * LN2)
    one, two = t([[0.2, 0.9]]), t([[0.7, 0.4]])
    both = standard_bce(torch.cat([one, two]), [[1, 0], [0, 1]])
    assert both.item() == pytest.approx(0.5 * (standard_bce(one, [[1, 0]]) + standard_bce(two, [[0, 1]])).item())


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        standard_bce(t([[0.5, 0.5]]), [[1.0]])
    with pytest.raises(ValueError):
        relaxed_bce(t([[0.5]]), [[1.0]], [[1.0, 0.0]])


def test_relaxed_equals_standard_when_relaxation_is_label():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n, c = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        p = torch.tensor(rng.random((n, c)))
        y = rng.integers(0, 2, (n, c)).astype(np.float64)
        assert relaxed_bce(p, y, y).item() == standard_bce(p, y).item()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=3),
       st.integers(0, 2), st.floats(0.0, 0.5))
def test_relaxed_bce_monotone_in_relaxation(preds, cls, bump):
    p = torch.tensor([preds], dtype=torch.float64)
    y = np.zeros((1, 3))
    e = np.full((1, 3), 0.25)
    raised = e.copy()
    raised[0, cls] += bump
    assert relaxed_bce(p, y, raised).item() <= relaxed_bce(p, y, e).item()


# -- priors --------------------------------------------------------------------

def test_identity_prior_values():
    k = 3
    assert identity_prior_loss(torch.ones(k, k, dtype=torch.float64), np.zeros((k, k))).item() == 0
    w = torch.rand(k, k, dtype=torch.float64)
    assert identity_prior_loss(w, np.ones((k, k))).item() == 0
    assert identity_prior_loss(torch.zeros(k, k, dtype=torch.float64), np.zeros((k, k))).item() == 1


def test_identity_prior_zero_iff_ones_outside_interference():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p_hat = rng.integers(0, 2, (4, 4))
        w = rng.random((4, 4))
        w_fixed = np.where(p_hat == 0, 1.0, w)
        assert identity_prior_loss(torch.tensor(w_fixed), p_hat).item() <= 1e-12
        if ((p_hat == 0) & (w < 1)).any():
            assert identity_prior_loss(torch.tensor(w), p_hat).item() > 1e-12


def test_semantic_prior_values():
    gamma = 0.1
    p_half = np.array([[1, 0], [0, 1]])
    assert semantic_prior_loss(torch.full((2, 2), 0.3, dtype=torch.float64), p_half, gamma).item() == pytest.approx(gamma)
    p = np.zeros((5, 5))
    p[0, :3] = 1  # interference fraction 3/25 >= gamma
    assert semantic_prior_loss(torch.tensor(p), p, gamma).item() == 0
    assert semantic_prior_loss(torch.ones(3, 3, dtype=torch.float64), np.zeros((3, 3)), gamma).item() == pytest.approx(gamma + 1)


def test_semantic_prior_cell_permutation_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p_hat = rng.integers(0, 2, (4, 4))
        w = rng.random((4, 4))
        perm = rng.permutation(16)
        a = semantic_prior_loss(torch.tensor(w), p_hat, 0.4).item()
        b = semantic_prior_loss(torch.tensor(w.reshape(-1)[perm].reshape(4, 4)),
                                p_hat.reshape(-1)[perm].reshape(4, 4), 0.4).item()
        assert a == pytest.approx(b, abs=1e-12)


# -- fused loss and total --------------------------------------------------------

def test_fused_loss_splits_pose_and_binary_terms():
    logits = t([[2.0, -1.0, 0.5, -0.3]])
    y = [[0, 1, 1, 0]]
    pose = np.array([True, True, False, False])
    expected = (-math.log(1 / (1 + math.exp(-0.5))) - math.log(1 - 1 / (1 + math.exp(0.3)))
                - math.log(math.exp(-1.0) / (math.exp(2.0) + math.exp(-1.0))))
    assert fused_loss(logits, y, pose).item() == pytest.approx(expected, rel=1e-12)


def test_total_loss_identity():
    r = total_loss({"cls_sem": 1, "cls_idt": 1, "prior_sem": 1, "prior_idt": 1, "cls_fuse": 2}, 0.5)
    assert r.total == 4
    assert total_loss({"cls_fuse": 1.25}).total == 1.25


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLossError):
        total_loss({"cls_fuse": float("nan")})
    with pytest.raises(NonFiniteLossError):
        total_loss({"cls_fuse": 1.0, "prior_sem": torch.tensor(float("inf"))})


# -- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("draw", range(20))
def test_loss_gradients(draw):
    for name, (fn, tensors) in loss_cases(draw).items():
        assert relative_error(fn, tensors) < TOLERANCE, name
