"""Detection stage: a residual U-Net trained on pseudo masks whose
probability maps yield tri-state pixel labels and nucleus centre points."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch.nn import functional as F

from .core import IGNORE, check_image, check_tristate
from .labels import PeakConfig, ThresholdConfig, local_maxima, threshold_trimap, voronoi_labels
from .nets import ResUNet, seed_everything
from .training import fit_pixel_network, predict_foreground


def check_supervision(masks):
    masks = [check_tristate(m) for m in masks]
    if not masks or all(np.all(m == IGNORE) for m in masks):
        raise ValueError("every pixel is labelled ignore; there is no supervision signal")
    return masks


class NucleiDetector(BaseEstimator):
    """Pixel classifier trained on tri-state pseudo masks.

    Pixels labelled -1 do not enter the cross-entropy.  After fitting,
    :meth:`predict_proba` gives foreground probability maps, :meth:`trimap`
    the thresholded tri-state labels and :meth:`predict_points` the strict
    local maxima of the probability map.
    """

    def __init__(self, backbone="compact", epochs=100, learning_rate=1e-4, batch_size=8,
                 t_fg=0.6, t_bg=0.6, peak_radius=5, min_prob=0.5, smooth_sigma=0.0,
                 augment=True, random_state=0, deterministic=True, verbose=0):
        self.backbone = backbone
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.t_fg = t_fg
        self.t_bg = t_bg
        self.peak_radius = peak_radius
        self.min_prob = min_prob
        self.smooth_sigma = smooth_sigma
        self.augment = augment
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    def fit(self, X, y):
        images = [check_image(im) for im in X]
        masks = check_supervision(y)
        if len(images) != len(masks) or any(
                im.shape[:2] != m.shape for im, m in zip(images, masks)):
            raise ValueError("pseudo masks must align with images")
        seed_everything(self.random_state, self.deterministic)
        self.net_ = ResUNet.from_preset(self.backbone, in_channels=images[0].shape[2])

        def loss_fn(logits, target):
            return F.cross_entropy(logits, target[:, 0], ignore_index=IGNORE)

        self.loss_history_ = fit_pixel_network(
            self.net_, images, np.stack(masks)[:, None], loss_fn, self.epochs,
            self.learning_rate, self.batch_size, seed=self.random_state,
            augment=self.augment, verbose=self.verbose, tag="detector")
        return self

    def predict_proba(self, X):
        return predict_foreground(self.net_, [check_image(im) for im in X])

    def trimap(self, X=None, probs=None):
        probs = self.predict_proba(X) if probs is None else probs
        cfg = ThresholdConfig(self.t_fg, self.t_bg)
        return [threshold_trimap(p, cfg) for p in probs]

    def predict_points(self, X=None, probs=None):
        probs = self.predict_proba(X) if probs is None else probs
        cfg = PeakConfig(self.peak_radius, self.min_prob, self.smooth_sigma)
        return [local_maxima(p, cfg) for p in probs]

    def predict(self, X):
        return self.predict_points(X)

    def voronoi(self, X=None, points=None, seed_radius=2):
        """Voronoi tri-state labels; images without detections get all -1."""
        if points is None:
            images = [check_image(im) for im in X]
            points = self.predict_points(images)
            shapes = [im.shape[:2] for im in images]
        else:
            shapes = [im.shape[:2] for im in X]
        out = []
        for pts, shape in zip(points, shapes):
            if len(pts) == 0:
                out.append(np.full(shape, IGNORE, dtype=np.int8))
            else:
                out.append(voronoi_labels(pts, shape, seed_radius=seed_radius))
        return out

    # -- persistence -------------------------------------------------------

    def get_checkpoint(self):
        return {"kind": "nucleiseg.detector", "params": self.get_params(),
                "state_dict": self.net_.state_dict(), "loss_history": self.loss_history_,
                "in_channels": self.net_.encoder[0][0].conv1.in_channels}

    def save(self, path):
        torch.save(self.get_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt):
        if not isinstance(ckpt, dict):
            ckpt = torch.load(ckpt, map_location="cpu", weights_only=False)
        obj = cls(**ckpt["params"])
        obj.net_ = ResUNet.from_preset(obj.backbone, in_channels=ckpt["in_channels"])
        obj.net_.load_state_dict(ckpt["state_dict"])
        obj.net_.eval()
        obj.loss_history_ = list(ckpt["loss_history"])
        return obj
