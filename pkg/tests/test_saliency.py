import numpy as np
import pytest
import torch

from nucleiseg.nets import BlockEncoder, EncoderSpec, seed_everything
from nucleiseg.saliency import (ActivationMap, SelfActivationMapper, activation_weights,
                                colorize_heatmap, feature_gradients, orient_weights,
                                self_activation_map, upsample, weighted_activation)


@pytest.fixture(scope="module")
def toy_encoder():
    seed_everything(0)
    enc = BlockEncoder(EncoderSpec(in_channels=3, widths=(4, 6, 8), convs_per_block=1,
                                   embedding_dim=5))
    return enc.double().eval()


def _tail(enc, layer, a):
    x = torch.as_tensor(a)[None]
    for block in enc.blocks[layer:]:
        x = block(x)
    return float(enc.project(x.mean(dim=(2, 3))).sum())


@pytest.mark.parametrize("layer", [1, 2])
def test_weights_match_finite_differences(toy_encoder, layer, rng):
    img = rng.random((16, 16, 3))
    feats, grads = feature_gradients(toy_encoder, img, layer)
    alpha = activation_weights(feats, grads)
    h, w = feats.shape[1:]
    eps = 1e-6
    with torch.no_grad():
        for k in range(feats.shape[0]):
            up, down = feats.copy(), feats.copy()
            up[k] += eps
            down[k] -= eps
            # a uniform shift of channel k probes the sum of its gradients
            fd = (_tail(toy_encoder, layer, up) - _tail(toy_encoder, layer, down)) / (2 * eps * h * w)
            assert fd == pytest.approx(alpha[k], rel=1e-4, abs=1e-10)


def test_activation_weights_validation():
    with pytest.raises(ValueError):
        activation_weights(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        activation_weights(np.zeros((1, 2, 2)), np.full((1, 2, 2), np.inf))
    g = np.ones((1, 2, 2))
    assert activation_weights(g, g)[0] == 1.0
    assert activation_weights(g, g, input_size=8)[0] == 0.5


def test_maps_non_negative(toy_encoder, rng):
    for _ in range(100):
        img = rng.random((12, 12, 3))
        m = self_activation_map(toy_encoder, img, layer=int(rng.integers(1, 4)))
        assert isinstance(m, ActivationMap)
        assert m.values.min() >= 0 and m.values.shape == (12, 12)
        assert 0 <= m.normalized_values.min() and m.normalized_values.max() <= 1


def test_weighted_activation_is_rectified():
    a = np.stack([np.ones((2, 2)), np.eye(2)])
    np.testing.assert_array_equal(weighted_activation(a, [-1.0, 2.0]), [[1, 0], [0, 1]])


def test_upsample_constant_and_shape():
    out = upsample(np.full((4, 4), 3.0), (9, 7))
    assert out.shape == (9, 7)
    np.testing.assert_allclose(out, 3.0)


def test_colorize_ramp():
    rgb = colorize_heatmap(np.array([[0.0, 0.5, 1.0]]))
    np.testing.assert_allclose(rgb[0], [[0, 0, 1], [0.5, 1, 0.5], [1, 0, 0]])


def test_orient_weights_prefers_right_skew(rng):
    bg = np.zeros((1, 20, 20))
    bg[0, 5:8, 5:8] = 1.0  # sparse bright blob
    assert orient_weights(np.array([2.0]), bg)[0] == 2.0
    assert orient_weights(np.array([-2.0]), bg)[0] == 2.0
    assert orient_weights(np.array([-2.0]), [bg, bg])[0] == 2.0


def test_mapper_dataset_weighting(toy_encoder, rng):
    imgs = [rng.random((12, 12, 3)) for _ in range(4)]
    m = SelfActivationMapper(toy_encoder, layer=1, weighting="dataset", polarity="none").fit(imgs)
    alphas = [activation_weights(*feature_gradients(toy_encoder, im, 1)) for im in imgs]
    np.testing.assert_allclose(m.weights_, np.mean(alphas, 0))
    maps = m.transform(imgs)
    assert len(maps) == 4 and maps[0].shape == (12, 12)


def test_mapper_validation(toy_encoder):
    with pytest.raises(ValueError):
        SelfActivationMapper(toy_encoder, layer=9).fit()
    with pytest.raises(ValueError):
        SelfActivationMapper(toy_encoder, weighting="dataset").fit()
    with pytest.raises(ValueError):
        SelfActivationMapper(toy_encoder, polarity="up").fit()
    with pytest.raises(ValueError):
        SelfActivationMapper(None).fit()
