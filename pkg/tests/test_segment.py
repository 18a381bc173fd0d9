import numpy as np
import pytest
import torch

from nucleiseg.segment import (EPS, JointLossConfig, NucleiSegmenter, joint_loss, pixel_loss,
                               segment_probability)


def _case(rng, shape=(10, 10)):
    pred = rng.uniform(0.05, 0.95, shape)
    vor = rng.integers(-1, 2, shape)
    tri = rng.integers(-1, 2, shape)
    return pred, vor, tri


def test_joint_loss_matches_formula(rng):
    pred, vor, tri = _case(rng)
    lam = 0.7
    s = vor != -1
    y = vor[s]
    expected = lam * np.mean(-(y * np.log(pred[s]) + (1 - y) * np.log(1 - pred[s]))) \
        + np.mean(-np.log(1 - pred[tri == 0]))
    assert joint_loss(pred, vor, tri, JointLossConfig(lam)) == pytest.approx(expected, rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    pred = rng.uniform(0.05, 0.95, (10, 10))
    vor = rng.integers(0, 2, (10, 10))
    tri = np.zeros((10, 10), int)  # every one of the 100 pixels is supervised
    t = torch.tensor(pred, requires_grad=True)
    joint_loss(t, torch.as_tensor(vor), torch.as_tensor(tri)).backward()
    grad = t.grad.numpy()
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        up, down = pred.copy(), pred.copy()
        up[idx] += h
        down[idx] -= h
        fd = (joint_loss(up, vor, tri) - joint_loss(down, vor, tri)) / (2 * h)
        assert fd == pytest.approx(grad[idx], rel=1e-4)


def test_unsupervised_pixels_are_ignored_bitwise(rng):
    pred, vor, tri = _case(rng, (16, 16))
    free = (vor == -1) & (tri != 0)
    assert free.any()
    base = joint_loss(pred, vor, tri)
    for _ in range(20):
        other = pred.copy()
        other[free] = rng.random(free.sum())
        assert joint_loss(other, vor, tri) == base


@pytest.mark.parametrize("lam", [0.5, 0.3, 7.0])
def test_lambda_linearity(rng, lam):
    pred, vor, tri = _case(rng)
    v1, bg1 = joint_loss(pred, vor, tri, JointLossConfig(lam), return_terms=True)
    v2, bg2 = joint_loss(pred, vor, tri, JointLossConfig(2 * lam), return_terms=True)
    # doubling is exact in binary floating point
    assert v2 == 2 * v1 and bg2 == bg1
    l1 = joint_loss(pred, vor, tri, JointLossConfig(lam))
    l2 = joint_loss(pred, vor, tri, JointLossConfig(2 * lam))
    assert l1 == v1 + bg1 and l2 == v2 + bg2
    # recombining the totals only adds the rounding of two float additions
    assert l2 - bg1 == pytest.approx(2 * (l1 - bg1), rel=1e-14)


def test_perfect_prediction_is_near_zero():
    vor = np.array([[1, 0, -1, -1]])
    tri = np.array([[-1, 0, 0, -1]])
    pred = np.array([[1.0, 0.0, 0.0, 0.3]])
    assert 0 <= joint_loss(pred, vor, tri) < 10 * EPS


def test_empty_terms():
    pred = np.full((2, 2), 0.5)
    none = np.full((2, 2), -1)
    with pytest.raises(ValueError):
        joint_loss(pred, none, none)
    only_bg = np.zeros((2, 2), int)
    assert joint_loss(pred, none, only_bg) == pytest.approx(np.log(2))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        joint_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


def test_lambda_validation():
    for bad in (0, -1, np.inf):
        with pytest.raises(ValueError):
            JointLossConfig(bad)


def test_pixel_loss():
    tri = np.array([[1, 0, -1]])
    pred = np.array([[0.5, 0.5, 0.99]])
    assert pixel_loss(pred, tri) == pytest.approx(np.log(2))


def test_segment_probability():
    p = np.zeros((10, 10))
    assert segment_probability(p)[1].max() == 0
    p[1:3, 1:3] = 0.9
    p[6:9, 6:9] = 0.8
    mask, inst = segment_probability(p)
    assert inst.max() == 2 and mask.sum() == 13


def test_segmenter_rejects_unsupervised():
    img = np.zeros((8, 8, 3))
    none = np.full((8, 8), -1)
    with pytest.raises(ValueError):
        NucleiSegmenter(epochs=1).fit([img], [none], [none])
