"""Pseudo-mask generation: fuse a colourised activation map with the raw
image, cluster pixel colours and map clusters to foreground/background by
their red-channel ranking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state

from .core import BACKGROUND, FOREGROUND, IGNORE, check_image, minmax


@dataclass
class FusionConfig:
    beta: float = 2.5

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


def fuse(activation_rgb, raw, cfg=None):
    """Return ``minmax(activation_rgb + beta * raw)`` over all channels jointly.

    A single-channel raw image is broadcast across the three colour channels.
    """
    cfg = cfg or FusionConfig()
    act = check_image(activation_rgb, "activation map")
    raw = check_image(raw, "raw image")
    if act.shape[:2] != raw.shape[:2]:
        raise ValueError(f"shape mismatch: activation {act.shape} vs raw {raw.shape}")
    if raw.shape[2] == 1 and act.shape[2] == 3:
        raw = np.repeat(raw, 3, axis=2)
    if raw.shape != act.shape:
        raise ValueError(f"channel mismatch: activation {act.shape} vs raw {raw.shape}")
    return minmax(act + cfg.beta * raw)


def _sq_dist(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.randint(n)]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centres
            idx = rng.randint(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = x[idx]
        closest = np.minimum(closest, ((x - centroids[i]) ** 2).sum(1))
    return centroids


def kmeans(features, k, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's algorithm from k-means++ seeding.

    Parameters
    ----------
    features : array of shape (n, d)
    k : int
        Number of clusters, ``2 <= k <= n``.
    seed : int
        Seed for the initialisation.
    max_iter : int
    tol : float
        Stop once no centroid moves by more than ``tol`` (Euclidean).

    Returns
    -------
    ClusterResult
        ``inertia_history`` records the objective after every assignment
        step; it is checked to be non-increasing.

    Notes
    -----
    A cluster that empties is re-seeded at the point farthest from its
    current centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = check_random_state(seed)
    centroids = _kmeans_pp(x, k, rng)

    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sq_dist(x, centroids)
        assign = d.argmin(1)
        own = d[np.arange(n), assign]
        history.append(float(own.sum()))

        new = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(own))
            new[j] = x[far]
            own[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift <= tol:
            break

    d = _sq_dist(x, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(n), assign].sum())
    history.append(inertia)
    h = np.asarray(history)
    if np.any(np.diff(h) > 1e-9 * max(1.0, h[0])):
        raise RuntimeError(f"k-means inertia increased: {history}")
    return ClusterResult(assign, centroids, inertia, history, n_iter)


def reassign_labels(clusters, fused, middle="ignore"):
    """Turn a pixel clustering into a tri-state mask via the red-channel prior.

    The cluster with the highest mean red value becomes foreground, the
    lowest becomes background.  Remaining clusters become ignore
    (``middle="ignore"``) or background (``middle="background"``).  Equal
    mean red values rank the larger cluster lower.
    """
    fused = check_image(fused, "fused image")
    h, w = fused.shape[:2]
    assign = np.asarray(clusters.assignments).reshape(h, w)
    red = fused[..., 0]
    k = len(clusters.centroids)
    stats = []
    for j in range(k):
        sel = assign == j
        size = int(sel.sum())
        mean_red = float(red[sel].mean()) if size else -np.inf
        stats.append((mean_red, -size, tuple(np.round(clusters.centroids[j], 12)), j))
    order = [s[3] for s in sorted(stats)]

    if middle == "ignore":
        middle_value = IGNORE
    elif middle == "background":
        middle_value = BACKGROUND
    else:
        raise ValueError(f"middle must be 'ignore' or 'background', got {middle!r}")
    lut = np.full(k, middle_value, dtype=np.int8)
    lut[order[0]] = BACKGROUND
    lut[order[-1]] = FOREGROUND
    return lut[assign]


class PseudoMaskGenerator(TransformerMixin, BaseEstimator):
    """Self-activation map -> fused colour map -> k-means -> tri-state mask.

    Parameters
    ----------
    mapper : SelfActivationMapper
        Fitted activation-map extractor.
    beta : float
        Weight of the raw image in the fusion.
    n_clusters : int
    middle : {"ignore", "background"}
        Fate of clusters ranked between foreground and background.
    random_state : int
    """

    def __init__(self, mapper=None, beta=2.5, n_clusters=3, middle="ignore",
                 random_state=0, max_iter=100, tol=1e-6):
        self.mapper = mapper
        self.beta = beta
        self.n_clusters = n_clusters
        self.middle = middle
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X=None, y=None):
        FusionConfig(self.beta)
        return self

    def mask_from_activation(self, activation_rgb, image):
        fused = fuse(activation_rgb, image, FusionConfig(self.beta))
        h, w = fused.shape[:2]
        raw = check_image(image)
        # a structureless input or fused map has nothing to segment
        flat = raw.reshape(-1, raw.shape[2]).var(axis=0).max() < 1e-6
        if flat or fused.reshape(-1, fused.shape[2]).var(axis=0).max() < 1e-6:
            return np.full((h, w), BACKGROUND, dtype=np.int8)
        clusters = kmeans(fused.reshape(-1, fused.shape[2]), self.n_clusters,
                          seed=self.random_state, max_iter=self.max_iter, tol=self.tol)
        return reassign_labels(clusters, fused, middle=self.middle)

    def transform(self, X):
        from .saliency import colorize_heatmap

        if self.mapper is None:
            raise ValueError("PseudoMaskGenerator needs a fitted SelfActivationMapper")
        images = [check_image(img) for img in X]
        maps = self.mapper.transform(images)
        return [self.mask_from_activation(colorize_heatmap(m), img)
                for m, img in zip(maps, images)]


def generate_pseudo_mask(mapper, image, beta=2.5, seed=0, middle="ignore"):
    """Single-image convenience wrapper around :class:`PseudoMaskGenerator`."""
    gen = PseudoMaskGenerator(mapper, beta=beta, middle=middle, random_state=seed)
    return gen.fit().transform([image])[0]
