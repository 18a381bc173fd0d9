"""Gradient-weighted self-activation maps from a pretrained block encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import skew
from sklearn.base import BaseEstimator, TransformerMixin
from torch.nn import functional as F

from .core import check_image, minmax
from .nets import to_tensor

TARGETS = ("embedding_sum", "embedding_norm")
POLARITIES = ("skew", "none")


@dataclass
class ActivationMap:
    values: np.ndarray
    normalized_values: np.ndarray


def activation_weights(feature_maps, gradients, input_size=None):
    """Per-channel weights: gradients summed over space and divided by ``input_size``.

    ``input_size`` defaults to ``h * w`` of the feature maps, which makes the
    weight a spatial mean.
    """
    a = np.asarray(feature_maps, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or g.ndim != 3:
        raise ValueError(f"gradients {g.shape} must match K x h x w feature maps {a.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradients contain non-finite values")
    n = g.shape[1] * g.shape[2] if input_size is None else input_size
    if n <= 0:
        raise ValueError("input_size must be positive")
    return g.sum(axis=(1, 2)) / n


def weighted_activation(feature_maps, weights):
    """``ReLU(sum_k w_k A_k)`` for ``K x h x w`` maps."""
    a = np.asarray(feature_maps, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return np.maximum(np.tensordot(w, a, axes=(0, 0)), 0.0)


def orient_weights(weights, feature_maps):
    """Flip ``weights`` so the pooled unrectified map is right-skewed.

    The sign of the embedding-sum gradient is arbitrary for an
    invariance-trained encoder.  Small objects on a large background give a
    long upper tail when the map is oriented towards them, so a negative
    pooled skewness means the map points at the background.
    ``feature_maps`` is one ``K x h x w`` array or a list of them.
    """
    w = np.asarray(weights, dtype=np.float64)
    maps = [feature_maps] if np.ndim(feature_maps) == 3 else list(feature_maps)
    pooled = np.concatenate([np.tensordot(w, np.asarray(a, dtype=np.float64), axes=(0, 0)).ravel()
                             for a in maps])
    if pooled.std() == 0:
        return w
    return -w if skew(pooled) < 0 else w


def upsample(values, shape):
    """Bilinear resize of a 2-D map to ``shape`` (half-pixel centres)."""
    t = torch.as_tensor(np.asarray(values, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def colorize_heatmap(activation):
    """Blue-to-red ramp: red = a, blue = 1 - a, green peaks at a = 0.5.

    Red rises strictly and blue falls strictly with activation, so the
    hottest pixels always carry the largest red value.
    """
    if isinstance(activation, ActivationMap):
        activation = activation.normalized_values
    a = np.clip(np.asarray(activation, dtype=np.float64), 0.0, 1.0)
    green = 1.0 - np.abs(2.0 * a - 1.0)
    return np.stack([a, green, 1.0 - a], axis=-1)


def _scalar_target(emb, target):
    if target == "embedding_sum":
        return emb.sum()
    if target == "embedding_norm":
        return emb.norm(dim=1).sum()
    raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")


def feature_gradients(encoder, image, layer, target="embedding_sum"):
    """Feature maps of block ``layer`` (1-based) and the gradient of the scalar target."""
    if not 1 <= layer <= encoder.n_blocks:
        raise ValueError(f"layer must be in 1..{encoder.n_blocks}, got {layer}")
    encoder.eval()
    x = to_tensor([check_image(image)]).to(next(encoder.parameters()).dtype)
    with torch.enable_grad():
        emb, feats = encoder(x)
        a = feats[layer - 1]
        z = _scalar_target(emb, target)
        (g,) = torch.autograd.grad(z, a)
    return a[0].detach().double().numpy(), g[0].double().numpy()


def self_activation_map(encoder, image, layer=1, target="embedding_sum", weights=None,
                        polarity="none"):
    """Compute the rectified gradient-weighted map of one encoder block.

    ``encoder`` may be a :class:`~nucleiseg.nets.BlockEncoder`, a fitted
    :class:`~nucleiseg.ssl.SelfSupervisedPretrainer` or a checkpoint dict.
    ``weights`` overrides the per-image channel weights (see
    :class:`SelfActivationMapper`).  ``polarity="skew"`` orients per-image
    weights with :func:`orient_weights`; explicit ``weights`` are used as given.
    """
    encoder = _resolve_encoder(encoder)
    img = check_image(image)
    feats, grads = feature_gradients(encoder, img, layer, target)
    if weights is None:
        alpha = activation_weights(feats, grads)
        if polarity == "skew":
            alpha = orient_weights(alpha, feats)
    else:
        alpha = np.asarray(weights)
    cam = weighted_activation(feats, alpha)
    values = np.maximum(upsample(cam, img.shape[:2]), 0.0)
    return ActivationMap(values, minmax(values))


def _resolve_encoder(obj):
    from .ssl import SelfSupervisedPretrainer

    if isinstance(obj, dict):
        obj = SelfSupervisedPretrainer.from_checkpoint(obj)
    if isinstance(obj, SelfSupervisedPretrainer):
        return obj.encoder_
    return obj


class SelfActivationMapper(TransformerMixin, BaseEstimator):
    """Transform images into normalized self-activation maps.

    Parameters
    ----------
    pretrainer : SelfSupervisedPretrainer, BlockEncoder or checkpoint dict
    layer : int
        1-based encoder block whose features are weighted.
    target : {"embedding_sum", "embedding_norm"}
        Scalar that is differentiated.
    weighting : {"image", "dataset"}
        ``image`` recomputes the channel weights for every image.
        ``dataset`` averages them over the images passed to :meth:`fit` and
        reuses that vector; an invariance-trained encoder has near-zero
        sensitivity to uniform channel shifts, so single-image weights can
        flip sign while their average does not.
    n_reference : int
        Maximum number of images averaged by ``weighting="dataset"``.
    polarity : {"skew", "none"}
        ``skew`` resolves the sign ambiguity of the weights with
        :func:`orient_weights` (pooled over the reference images for
        dataset weighting, per image otherwise).
    """

    def __init__(self, pretrainer=None, layer=1, target="embedding_sum", weighting="image",
                 n_reference=64, polarity="skew"):
        self.pretrainer = pretrainer
        self.layer = layer
        self.target = target
        self.weighting = weighting
        self.n_reference = n_reference
        self.polarity = polarity

    def fit(self, X=None, y=None):
        if self.pretrainer is None:
            raise ValueError("SelfActivationMapper needs a pretrained encoder")
        self.encoder_ = _resolve_encoder(self.pretrainer)
        if not 1 <= self.layer <= self.encoder_.n_blocks:
            raise ValueError(f"layer must be in 1..{self.encoder_.n_blocks}, got {self.layer}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        self.weights_ = None
        if self.weighting == "dataset":
            if X is None or len(X) == 0:
                raise ValueError("weighting='dataset' needs reference images in fit")
            pairs = [feature_gradients(self.encoder_, im, self.layer, self.target)
                     for im in list(X)[: self.n_reference]]
            self.weights_ = np.mean([activation_weights(a, g) for a, g in pairs], axis=0)
            if self.polarity == "skew":
                self.weights_ = orient_weights(self.weights_, [a for a, _ in pairs])
        elif self.weighting != "image":
            raise ValueError(f"weighting must be 'image' or 'dataset', got {self.weighting!r}")
        return self

    def activation_map(self, image):
        if not hasattr(self, "encoder_"):
            self.fit()
        return self_activation_map(self.encoder_, image, self.layer, self.target,
                                   weights=self.weights_, polarity=self.polarity)

    def transform(self, X):
        return [self.activation_map(im).normalized_values for im in X]
