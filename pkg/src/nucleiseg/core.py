"""Raster conventions and pixel utilities shared by every stage.

All rasters are numpy arrays indexed ``(row, col)`` with the origin at the
top-left corner.  Images are ``H x W x C`` floats in ``[0, 1]``; tri-state
masks hold ``{1, 0, -1}`` (foreground, background, ignore); instance maps
hold non-negative integers with ``0`` as background.
"""
from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage

FOREGROUND = 1
BACKGROUND = 0
IGNORE = -1

# palette used when tri-state masks are written as 8-bit rasters
TRISTATE_PALETTE = {FOREGROUND: 255, BACKGROUND: 0, IGNORE: 128}


class RasterError(ValueError):
    """Raised for malformed raster inputs."""


def check_image(image, name="image"):
    """Validate an image and return it as ``float64`` ``H x W x C``.

    Single-channel ``H x W`` input gains a trailing channel axis.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise RasterError(f"{name} must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise RasterError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise RasterError(f"{name} contains non-finite values")
    return arr


def check_probability(prob, name="probability map"):
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise RasterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RasterError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise RasterError(f"{name} values must lie in [0, 1]")
    return arr


def check_tristate(mask, name="tri-state mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise RasterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isin(arr, (FOREGROUND, BACKGROUND, IGNORE))):
        raise RasterError(f"{name} may only contain 1, 0 and -1")
    return arr.astype(np.int8)


def check_instance_map(labels, name="instance map"):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise RasterError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise RasterError(f"{name} must hold integer ids")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise RasterError(f"{name} must be non-negative")
    return arr


def normalize(image):
    """Min-max scale each channel of ``image`` into ``[0, 1]``.

    Constant channels map to 0.  Accepts ``H x W`` or ``H x W x C`` input of
    any numeric range and always returns ``H x W x C`` float64.

    >>> normalize(np.array([[10.0, 20.0, 30.0]]))[..., 0]
    array([[0. , 0.5, 1. ]])
    """
    arr = check_image(image)
    lo = arr.min(axis=(0, 1), keepdims=True)
    span = arr.max(axis=(0, 1), keepdims=True) - lo
    out = np.zeros_like(arr)
    nz = span[0, 0] > 0
    out[..., nz] = (arr[..., nz] - lo[..., nz]) / span[..., nz]
    # guard against rounding just outside the unit interval
    return np.clip(out, 0.0, 1.0)


def minmax(values):
    """Global min-max scaling of an array of any shape; constant input maps to 0."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros_like(arr)
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def _structure(connectivity):
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask, connectivity=8):
    """Label maximal connected foreground regions ``1..n``.

    Ids are assigned in row-major order of each region's first pixel.
    """
    structure = _structure(connectivity)
    binary = np.asarray(mask).astype(bool)
    if binary.ndim != 2:
        raise RasterError(f"mask must be 2-D, got shape {binary.shape}")
    labels, _ = ndimage.label(binary, structure=structure)
    # ndimage.label already scans row-major, relabel defensively all the same
    return relabel_sequential(labels)


def relabel_sequential(labels):
    """Renumber positive ids to ``1..n`` in row-major first-pixel order."""
    labels = check_instance_map(labels)
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels]


def instance_centroids(labels):
    """Return ``{id: (row, col)}`` float centroids of every instance."""
    labels = check_instance_map(labels)
    ids = [i for i in np.unique(labels) if i > 0]
    if not ids:
        return {}
    cents = ndimage.center_of_mass(np.ones_like(labels), labels, ids)
    return {int(i): (float(r), float(c)) for i, (r, c) in zip(ids, cents)}


def as_points(points):
    """Coerce a point collection into an ``(n, 2)`` int array of ``(row, col)``."""
    arr = np.asarray(points, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise RasterError(f"points must have shape (n, 2), got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _atomic_target(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    os.close(fd)
    return path, Path(tmp)


def _write_png(path, array):
    from PIL import Image

    path, tmp = _atomic_target(path)
    img = Image.fromarray(np.ascontiguousarray(array))
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def _read_png(path):
    from PIL import Image

    with Image.open(path) as img:
        return np.array(img)


def write_image(path, image, bits=8):
    """Write a ``[0, 1]`` float image as an 8- or 16-bit lossless PNG."""
    arr = check_image(image)
    if bits == 8:
        out = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    elif bits == 16:
        out = np.round(np.clip(arr, 0, 1) * 65535).astype(np.uint16)
        if out.shape[2] == 3:
            raise RasterError("16-bit output is single-channel only")
    else:
        raise ValueError("bits must be 8 or 16")
    if out.shape[2] == 1:
        out = out[..., 0]
    _write_png(path, out)


def read_image(path):
    """Read an 8/16-bit image into a float ``H x W x C`` array in ``[0, 1]``."""
    arr = _read_png(path)
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32) or arr.max() > 255:
        out = arr.astype(np.float64) / 65535.0
    else:
        out = arr.astype(np.float64) / 255.0
    if out.ndim == 3 and out.shape[2] == 4:
        out = out[..., :3]
    return check_image(out)


def write_instance_map(path, labels):
    labels = check_instance_map(labels)
    if labels.size and labels.max() > 65535:
        raise RasterError("instance ids exceed the 16-bit range")
    _write_png(path, labels.astype(np.uint16))


def read_instance_map(path):
    arr = _read_png(path)
    if arr.ndim == 3:
        raise RasterError(f"{path}: instance maps must be single-channel")
    return check_instance_map(arr)


def write_tristate(path, mask):
    mask = check_tristate(mask)
    out = np.zeros(mask.shape, dtype=np.uint8)
    for value, grey in TRISTATE_PALETTE.items():
        out[mask == value] = grey
    _write_png(path, out)


def read_tristate(path):
    arr = _read_png(path)
    out = np.full(arr.shape, IGNORE, dtype=np.int8)
    out[arr == TRISTATE_PALETTE[FOREGROUND]] = FOREGROUND
    out[arr == TRISTATE_PALETTE[BACKGROUND]] = BACKGROUND
    bad = ~np.isin(arr, list(TRISTATE_PALETTE.values()))
    if bad.any():
        raise RasterError(f"{path}: unexpected grey levels in tri-state raster")
    return out


def write_points(path, points):
    """Write ``(row, col)`` points as CSV with header ``row,col``."""
    pts = as_points(points)
    path, tmp = _atomic_target(path)
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col"])
        writer.writerows(pts.tolist())
    os.replace(tmp, path)


def read_points(path, shape=None):
    """Read a ``row,col`` CSV; with ``shape`` given, reject out-of-bounds rows.

    Raises
    ------
    RasterError
        On a bad header, unparsable row or out-of-bounds coordinate.  The
        message names the 1-based CSV line.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col"]:
            raise RasterError(f"{path}: expected header 'row,col', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                r, c = (int(float(v)) for v in rec)
            except ValueError as exc:
                raise RasterError(f"{path}: line {lineno}: cannot parse {rec}") from exc
            if shape is not None and not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise RasterError(
                    f"{path}: line {lineno}: point ({r}, {c}) outside image {tuple(shape[:2])}"
                )
            rows.append((r, c))
    return as_points(rows)
