"""Label derivation from probability maps: tri-state thresholding, strict
local-maximum peak search and Voronoi partition labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import BACKGROUND, FOREGROUND, IGNORE, as_points, check_probability


@dataclass
class ThresholdConfig:
    t_fg: float = 0.6
    t_bg: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.t_fg <= 1.0:
            raise ValueError(f"t_fg must lie in (0, 1], got {self.t_fg}")
        if not 0.0 <= self.t_bg < 1.0:
            raise ValueError(f"t_bg must lie in [0, 1), got {self.t_bg}")
        if self.t_bg > self.t_fg:
            raise ValueError("t_bg must not exceed t_fg")


@dataclass
class PeakConfig:
    radius: int = 5
    min_prob: float = 0.5
    smooth_sigma: float = 0.0

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be an integer >= 1, got {self.radius}")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be non-negative")


def threshold_trimap(prob, cfg=None):
    """1 where ``p > t_fg``, 0 where ``p < t_bg``, -1 elsewhere."""
    cfg = cfg or ThresholdConfig()
    prob = check_probability(prob)
    out = np.full(prob.shape, IGNORE, dtype=np.int8)
    out[prob < cfg.t_bg] = BACKGROUND
    out[prob > cfg.t_fg] = FOREGROUND
    return out


def local_maxima(prob, cfg=None):
    """Points strictly greater than every other value in their square window.

    The window has half-width ``cfg.radius`` and is clipped at the image
    border.  Plateaus produce no peak.  With ``cfg.smooth_sigma > 0`` the map
    is Gaussian-smoothed before the search.

    Returns an ``(n, 2)`` int array of ``(row, col)`` in row-major order.
    """
    cfg = cfg or PeakConfig()
    prob = check_probability(prob)
    if cfg.smooth_sigma > 0:
        prob = ndimage.gaussian_filter(prob, cfg.smooth_sigma, mode="nearest")
    size = 2 * int(cfg.radius) + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[cfg.radius, cfg.radius] = False
    neighbour_max = ndimage.maximum_filter(
        prob, footprint=footprint, mode="constant", cval=-np.inf
    )
    peaks = (prob > neighbour_max) & (prob >= cfg.min_prob)
    return np.argwhere(peaks).astype(np.int64)


def nearest_seed(points, shape):
    """Index of the nearest seed per pixel under squared Euclidean distance.

    Pixels equidistant from two or more seeds get -1.
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("at least one seed point is required")
    h, w = shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if len(pts) == 1:
        return np.zeros((h, w), dtype=np.int64)
    _, idx = cKDTree(pts).query(grid, k=2)
    # exact integer distances settle ties the float query cannot
    d0 = ((grid - pts[idx[:, 0]]) ** 2).sum(1)
    d1 = ((grid - pts[idx[:, 1]]) ** 2).sum(1)
    first = np.where(d1 < d0, idx[:, 1], idx[:, 0])
    first[d0 == d1] = -1
    return first.reshape(h, w)


def voronoi_edges(cells):
    """Edge pixels of a nearest-seed partition.

    A pixel is an edge when it is equidistant from several seeds or when a
    4-neighbour with a unique nearest seed belongs to a different cell.
    """
    cells = np.asarray(cells)
    edge = cells < 0
    padded = np.pad(cells, 1, mode="edge")
    centre = padded[1:-1, 1:-1]
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
        edge |= (nb >= 0) & (centre >= 0) & (nb != centre)
    return edge


def voronoi_labels(points, shape, seed_radius=2):
    """Tri-state Voronoi labels: seed disks 1, cell edges 0, everything else -1.

    Seed disks are clipped to their own cell and never overwrite edges.
    ``seed_radius=0`` labels only the seed pixels themselves.
    """
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("voronoi_labels needs at least one seed point")
    h, w = shape[:2]
    if np.any(pts < 0) or np.any(pts[:, 0] >= h) or np.any(pts[:, 1] >= w):
        raise ValueError("seed points must lie inside the image")
    cells = nearest_seed(pts, (h, w))
    edge = voronoi_edges(cells)

    rr, cc = np.mgrid[0:h, 0:w]
    safe = np.where(cells >= 0, cells, 0)
    d2 = (rr - pts[safe, 0]) ** 2 + (cc - pts[safe, 1]) ** 2
    owned = (cells >= 0) & (d2 <= seed_radius ** 2)

    out = np.full((h, w), IGNORE, dtype=np.int8)
    out[owned] = FOREGROUND
    out[edge] = BACKGROUND
    out[pts[:, 0], pts[:, 1]] = FOREGROUND
    return out
