"""Segmentation stage: joint Voronoi + background supervision and
end-to-end instance inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .core import BACKGROUND, IGNORE, check_image, check_tristate, connected_components
from .nets import ResUNet, seed_everything
from .training import fit_pixel_network, predict_foreground

EPS = 1e-7


@dataclass
class JointLossConfig:
    lambda_: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.lambda_) or self.lambda_ <= 0:
            raise ValueError(f"lambda_ must be finite and > 0, got {self.lambda_}")


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def joint_loss(pred, vor, trimap, cfg=None, eps=EPS, return_terms=False):
    """Negative log-likelihood of the joint partition objective.

    ``lambda * BCE(pred, vor)`` over pixels where ``vor != -1`` plus
    ``-log(1 - pred)`` over pixels where ``trimap == 0``; each term is the
    mean over its own supervised pixels and an empty term contributes 0.

    ``pred`` may be a numpy array (a float is returned) or a tensor (a tensor
    is returned, differentiable).  With ``return_terms`` the pair
    ``(voronoi_term, background_term)`` is returned instead of their sum,
    the first already scaled by lambda.
    """
    cfg = cfg or JointLossConfig()
    p, numpy_in = _tensor(pred)
    vor = torch.as_tensor(np.asarray(vor)) if not isinstance(vor, torch.Tensor) else vor
    tri = torch.as_tensor(np.asarray(trimap)) if not isinstance(trimap, torch.Tensor) else trimap
    if p.shape != vor.shape or p.shape != tri.shape:
        raise ValueError(f"shape mismatch: pred {tuple(p.shape)}, vor {tuple(vor.shape)}, "
                         f"trimap {tuple(tri.shape)}")
    vor_sel = vor != IGNORE
    bg_sel = tri == BACKGROUND
    if not bool(vor_sel.any()) and not bool(bg_sel.any()):
        raise ValueError("no supervised pixels in either loss term")
    pc = p.clamp(eps, 1.0 - eps)
    zero = p.sum() * 0.0
    if bool(vor_sel.any()):
        y = vor[vor_sel].to(p.dtype)
        pv = pc[vor_sel]
        vor_term = cfg.lambda_ * -(y * torch.log(pv) + (1 - y) * torch.log(1 - pv)).mean()
    else:
        vor_term = zero
    if bool(bg_sel.any()):
        bg_term = -torch.log(1 - pc[bg_sel]).mean()
    else:
        bg_term = zero
    if return_terms:
        return (float(vor_term), float(bg_term)) if numpy_in else (vor_term, bg_term)
    total = vor_term + bg_term
    return float(total) if numpy_in else total


def pixel_loss(pred, trimap, eps=EPS):
    """Plain BCE against the tri-state pixel labels (ignore pixels skipped)."""
    p, numpy_in = _tensor(pred)
    tri = torch.as_tensor(np.asarray(trimap)) if not isinstance(trimap, torch.Tensor) else trimap
    sel = tri != IGNORE
    if not bool(sel.any()):
        raise ValueError("no supervised pixels")
    pc = p.clamp(eps, 1.0 - eps)[sel]
    y = tri[sel].to(p.dtype)
    out = -(y * torch.log(pc) + (1 - y) * torch.log(1 - pc)).mean()
    return float(out) if numpy_in else out


class NucleiSegmenter(BaseEstimator):
    """Segmentation network trained on Voronoi labels and pixel-level trimaps.

    Parameters
    ----------
    lambda_ : float
        Weight of the Voronoi term.
    use_voronoi : bool
        ``False`` trains on the trimap alone (plain BCE over its foreground
        and background pixels); this is the pixel-only ablation.
    threshold : float
        Foreground cut-off at inference.
    connectivity : {4, 8}
    """

    def __init__(self, backbone="compact", epochs=100, learning_rate=1e-4, batch_size=8,
                 lambda_=0.5, use_voronoi=True, threshold=0.5, connectivity=8,
                 augment=True, random_state=0, deterministic=True, verbose=0):
        self.backbone = backbone
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda_ = lambda_
        self.use_voronoi = use_voronoi
        self.threshold = threshold
        self.connectivity = connectivity
        self.augment = augment
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    def fit(self, X, vor_labels, trimaps):
        images = [check_image(im) for im in X]
        vor = [check_tristate(v) for v in vor_labels]
        tri = [check_tristate(t) for t in trimaps]
        if not (len(images) == len(vor) == len(tri)) or any(
                im.shape[:2] != v.shape or v.shape != t.shape
                for im, v, t in zip(images, vor, tri)):
            raise ValueError("Voronoi labels and trimaps must align with images")
        if self.use_voronoi:
            if all(np.all(v == IGNORE) for v in vor) and all(np.all(t != BACKGROUND) for t in tri):
                raise ValueError("every pixel is unsupervised; there is no supervision signal")
        elif all(np.all(t == IGNORE) for t in tri):
            raise ValueError("every trimap pixel is ignore; there is no supervision signal")
        cfg = JointLossConfig(self.lambda_)
        seed_everything(self.random_state, self.deterministic)
        self.net_ = ResUNet.from_preset(self.backbone, in_channels=images[0].shape[2])

        def loss_fn(logits, target):
            prob = torch.softmax(logits, dim=1)[:, 1]
            if self.use_voronoi:
                return joint_loss(prob, target[:, 0], target[:, 1], cfg)
            return pixel_loss(prob, target[:, 1])

        targets = np.stack([np.stack(vor), np.stack(tri)], axis=1)
        self.loss_history_ = fit_pixel_network(
            self.net_, images, targets, loss_fn, self.epochs, self.learning_rate,
            self.batch_size, seed=self.random_state, augment=self.augment,
            verbose=self.verbose, tag="segmenter")
        return self

    def predict_proba(self, X):
        return predict_foreground(self.net_, [check_image(im) for im in X])

    def predict(self, X):
        return [p > self.threshold for p in self.predict_proba(X)]

    def predict_instances(self, X):
        return [segment_probability(p, self.threshold, self.connectivity)[1]
                for p in self.predict_proba(X)]

    def get_checkpoint(self):
        return {"kind": "nucleiseg.segmenter", "params": self.get_params(),
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


def segment_probability(prob, threshold=0.5, connectivity=8):
    """Binary mask ``prob > threshold`` and its connected-component instances."""
    mask = np.asarray(prob) > threshold
    return mask, connected_components(mask, connectivity)


def segment(model, image):
    """Run a fitted :class:`NucleiSegmenter` on one image -> ``(mask, instances)``."""
    prob = model.predict_proba([image])[0]
    return segment_probability(prob, model.threshold, model.connectivity)
