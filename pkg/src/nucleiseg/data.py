"""Dataset layouts, patch tiling and the synthetic nuclei generator.

Directory layout shared by every profile::

    root/
      train/ val/ test/          # any subset of the three
        images/<stem>.png        # 8- or 16-bit RGB or grey
        masks/<stem>.png         # 16-bit instance map   (mask and synthetic profiles)
        points/<stem>.csv        # ``row,col`` centroids (point and synthetic profiles)

A root holding ``images/`` directly is read as a single ``train`` split.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    RasterError,
    instance_centroids,
    read_image,
    read_instance_map,
    read_points,
    write_image,
    write_instance_map,
    write_points,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PROFILES = ("mask", "point", "synthetic")


class ManifestError(ValueError):
    """Dataset directory problems; ``problems`` lists one message per defect."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid dataset:\n  " + "\n  ".join(self.problems))


class InfeasiblePacking(ValueError):
    pass


@dataclass
class ManifestEntry:
    image_path: Path
    split: str
    gt_mask_path: Path | None = None
    gt_points_path: Path | None = None
    gt_mask: np.ndarray | None = field(default=None, repr=False)
    gt_points: np.ndarray | None = field(default=None, repr=False)

    @property
    def stem(self):
        return self.image_path.stem

    def load_image(self):
        return read_image(self.image_path)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)


def load_manifest(root, profile="synthetic"):
    """Scan ``root`` and parse every ground-truth file.

    Raises
    ------
    ManifestError
        Listing every missing, unreadable, misaligned or out-of-bounds file.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    root = Path(root)
    if not root.is_dir():
        raise ManifestError([f"{root}: not a directory"])
    split_dirs = [(s, root / s) for s in SPLITS if (root / s / "images").is_dir()]
    if not split_dirs and (root / "images").is_dir():
        split_dirs = [("train", root)]

    manifest = DatasetManifest()
    if not split_dirs:
        msg = f"{root}: no images found"
        logger.warning(msg)
        manifest.warnings.append(msg)
        return manifest

    want_mask = profile in ("mask", "synthetic")
    want_points = profile in ("point", "synthetic")
    problems = []
    for split, base in split_dirs:
        for img_path in sorted((base / "images").glob("*.png")):
            entry = ManifestEntry(img_path, split)
            try:
                shape = read_image(img_path).shape
            except Exception as exc:  # noqa: BLE001 - collect every defect
                problems.append(f"{img_path}: unreadable image ({exc})")
                continue
            if want_mask:
                p = base / "masks" / f"{img_path.stem}.png"
                if not p.exists():
                    problems.append(f"{img_path}: missing instance mask {p}")
                else:
                    try:
                        m = read_instance_map(p)
                        if m.shape != shape[:2]:
                            problems.append(f"{p}: shape {m.shape} differs from image {shape[:2]}")
                        entry.gt_mask_path, entry.gt_mask = p, m
                    except Exception as exc:  # noqa: BLE001
                        problems.append(f"{p}: unreadable instance mask ({exc})")
            if want_points:
                p = base / "points" / f"{img_path.stem}.csv"
                if not p.exists():
                    problems.append(f"{img_path}: missing point file {p}")
                else:
                    try:
                        entry.gt_points_path = p
                        entry.gt_points = read_points(p, shape)
                    except (RasterError, OSError) as exc:
                        problems.append(str(exc))
            manifest.entries.append(entry)
    if problems:
        raise ManifestError(problems)
    if not manifest.entries:
        msg = f"{root}: no images found"
        logger.warning(msg)
        manifest.warnings.append(msg)
    return manifest


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _grid(length, patch, stride):
    n = max(1, int(np.ceil((length - patch) / stride)) + 1)
    return [i * stride for i in range(n)]


def extract_patches(image, patch_size, stride=None):
    """Tile ``image`` on a regular grid; the far edges are reflect-padded.

    Returns the list of patches and the ``(row, col)`` offset of each.
    """
    img = np.asarray(image)
    stride = stride or patch_size
    h, w = img.shape[:2]
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch_size {patch_size} exceeds image size {(h, w)}")
    rows, cols = _grid(h, patch_size, stride), _grid(w, patch_size, stride)
    pad_h = rows[-1] + patch_size - h
    pad_w = cols[-1] + patch_size - w
    pad = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, pad, mode="reflect") if (pad_h or pad_w) else img
    patches, offsets = [], []
    for r in rows:
        for c in cols:
            patches.append(padded[r:r + patch_size, c:c + patch_size].copy())
            offsets.append((r, c))
    return patches, offsets


def stitch_patches(patches, offsets, shape):
    """Average overlapping patches back into a raster of ``shape``."""
    first = np.asarray(patches[0])
    p = first.shape[0]
    h, w = shape[:2]
    extra = first.shape[2:]
    full_h = max(r for r, _ in offsets) + p
    full_w = max(c for _, c in offsets) + p
    acc = np.zeros((full_h, full_w) + extra, dtype=np.float64)
    cnt = np.zeros((full_h, full_w), dtype=np.float64)
    for patch, (r, c) in zip(patches, offsets):
        acc[r:r + p, c:c + p] += patch
        cnt[r:r + p, c:c + p] += 1
    cnt = cnt.reshape(cnt.shape + (1,) * len(extra))
    out = (acc / np.maximum(cnt, 1))[:h, :w]
    return out.astype(first.dtype) if np.issubdtype(first.dtype, np.floating) else out


# ---------------------------------------------------------------------------
# synthetic nuclei
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    image_size: tuple = (64, 64)
    nuclei_count_range: tuple = (6, 10)
    radius_range: tuple = (3.5, 6.0)
    intensity_contrast: float = 1.0
    overlap_fraction: float = 0.1
    noise_sigma: float = 0.02
    seed: int = 0
    background_rgb: tuple = (0.86, 0.66, 0.82)
    nucleus_rgb: tuple = (0.66, 0.28, 0.58)
    texture_sigma: float = 0.03
    max_tries: int = 500

    def __post_init__(self):
        lo, hi = self.nuclei_count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid nuclei_count_range {self.nuclei_count_range}")
        rlo, rhi = self.radius_range
        if rlo <= 0 or rlo > rhi:
            raise ValueError(f"invalid radius_range {self.radius_range}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _ellipse(shape, center, a, b, theta):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = dc * ct + dr * st
    v = -dc * st + dr * ct
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def synth_nuclei(cfg=None):
    """Render a textured image of elliptical nuclei with exact ground truth.

    Returns
    -------
    image : H x W x 3 float array in [0, 1]
    labels : H x W int instance map, ids ``1..n`` in placement order
    points : (n, 2) int array of nucleus centres ``(row, col)``

    Later nuclei are drawn on top of earlier ones.  A placement is rejected
    when it overlaps existing nuclei by more than ``overlap_fraction`` of
    either area, splits an existing nucleus, or shifts any visible region
    centroid more than one pixel from its emitted centre.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    n = int(rng.integers(cfg.nuclei_count_range[0], cfg.nuclei_count_range[1] + 1))
    labels = np.zeros((h, w), dtype=np.int64)
    weight = np.zeros((h, w))
    centres = []
    margin = int(np.ceil(cfg.radius_range[1])) + 1
    if n and (h <= 2 * margin or w <= 2 * margin):
        raise InfeasiblePacking(f"image {cfg.image_size} too small for radius {cfg.radius_range}")

    for k in range(1, n + 1):
        for _ in range(cfg.max_tries):
            cr = int(rng.integers(margin, h - margin))
            cc = int(rng.integers(margin, w - margin))
            a, b = rng.uniform(*cfg.radius_range, size=2)
            theta = rng.uniform(0, np.pi)
            d = _ellipse((h, w), (cr, cc), a, b, theta)
            region = d <= 1.0
            area = region.sum()
            if area == 0 or labels[cr, cc] != 0:
                continue
            trial = labels.copy()
            trial[region] = k
            ok = True
            for j in np.unique(labels[region]):
                if j == 0:
                    continue
                old_area = (labels == j).sum()
                shared = (labels[region] == j).sum()
                if shared > cfg.overlap_fraction * min(area, old_area):
                    ok = False
                    break
            if not ok:
                continue
            cents = instance_centroids(trial)
            for j, (pr, pc) in enumerate(centres + [(cr, cc)], start=1):
                if j not in cents or np.hypot(cents[j][0] - pr, cents[j][1] - pc) > 1.0:
                    ok = False
                    break
                comp = ndimage.label(trial == j)[1]
                if comp != 1:
                    ok = False
                    break
            if not ok:
                continue
            labels = trial
            centres.append((cr, cc))
            # soft rim so intensity falls off over roughly one pixel
            soft = 1.0 / (1.0 + np.exp(-(1.0 - d) * min(a, b) / 0.6))
            dome = 0.85 + 0.15 * np.clip(1.0 - d ** 2, 0.0, 1.0)
            weight = np.maximum(weight, soft * dome)
            break
        else:
            raise InfeasiblePacking(
                f"could not place nucleus {k} of {n} after {cfg.max_tries} tries")

    bg = np.asarray(cfg.background_rgb, dtype=np.float64)
    nuc = bg + cfg.intensity_contrast * (np.asarray(cfg.nucleus_rgb) - bg)
    tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), 3.0)
    tex = tex / (tex.std() + 1e-12) * cfg.texture_sigma
    chrom = ndimage.gaussian_filter(rng.normal(size=(h, w)), 1.0)
    chrom = chrom / (chrom.std() + 1e-12) * cfg.texture_sigma
    base = bg[None, None, :] * (1.0 + tex[..., None])
    nucleus = nuc[None, None, :] * (1.0 + chrom[..., None])
    image = base * (1.0 - weight[..., None]) + nucleus * weight[..., None]
    image = image + rng.normal(scale=cfg.noise_sigma, size=image.shape) if cfg.noise_sigma else image
    image = np.clip(image, 0.0, 1.0)
    points = np.asarray(centres, dtype=np.int64).reshape(-1, 2)
    return image, labels, points


def synth_dataset(n, cfg=None, seed=0):
    """``n`` synthetic triples with per-image seeds derived from ``seed``."""
    cfg = cfg or SynthConfig()
    out = []
    for i in range(n):
        params = dict(cfg.__dict__)
        params["seed"] = int(seed) * 100_003 + i
        out.append(synth_nuclei(SynthConfig(**params)))
    return out


def split_seed(seed, split):
    """Generator seed of one split; splits of one dataset seed never share images."""
    return 3 * int(seed) + 1 + SPLITS.index(split)


def write_synthetic_dataset(root, n_train, n_test, cfg=None, seed=0, n_val=0):
    """Write a synthetic dataset in the shared directory layout."""
    root = Path(root)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split in SPLITS:
        if counts[split] <= 0:
            continue
        triples = synth_dataset(counts[split], cfg, seed=split_seed(seed, split))
        for i, (image, labels, points) in enumerate(triples):
            stem = f"{split}_{i:04d}"
            write_image(root / split / "images" / f"{stem}.png", image)
            write_instance_map(root / split / "masks" / f"{stem}.png", labels)
            write_points(root / split / "points" / f"{stem}.csv", points)
    return root
