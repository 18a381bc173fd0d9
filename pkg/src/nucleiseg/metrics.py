"""Segmentation and detection metrics.

Pixel-level IoU/F1, object-level Dice, Aggregated Jaccard Index, one-to-one
point matching with precision/recall/F1 and the counting error (MP).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import as_points, check_instance_map


@dataclass(frozen=True)
class PixelScores:
    iou: float
    f1: float
    tp: int
    fp: int
    fn: int

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ObjectScores:
    dice_obj: float
    aji: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DetectionScores:
    precision: float
    recall: float
    f1: float
    mp: float
    match_radius: float
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def as_dict(self):
        return asdict(self)


def scores_from_counts(tp, fp, fn):
    """F1 and IoU from confusion counts; an all-zero count gives 1.0 for both."""
    tp, fp, fn = int(tp), int(fp), int(fn)
    denom = tp + fp + fn
    if denom == 0:
        return PixelScores(1.0, 1.0, tp, fp, fn)
    return PixelScores(tp / denom, 2 * tp / (2 * tp + fp + fn), tp, fp, fn)


def pixel_scores(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return scores_from_counts(tp, fp, fn)


def _overlap_table(pred, gt):
    """Contingency counts between gt ids (rows) and pred ids (cols), id 0 included."""
    n_gt = int(gt.max()) + 1 if gt.size else 1
    n_pr = int(pred.max()) + 1 if pred.size else 1
    table = np.zeros((n_gt, n_pr), dtype=np.int64)
    np.add.at(table, (gt.ravel(), pred.ravel()), 1)
    return table


def _check_pair(pred, gt):
    pred = check_instance_map(pred, "pred")
    gt = check_instance_map(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def object_dice(pred, gt):
    """Object-level Dice: area-weighted Dice of each object against its best partner.

    Each ground-truth object is scored against the prediction it overlaps
    most, each predicted object against the ground truth it overlaps most,
    and the two area-weighted averages are averaged.  Objects without any
    overlap contribute 0.  Two empty maps score 1.
    """
    pred, gt = _check_pair(pred, gt)
    table = _overlap_table(pred, gt)
    gt_area = table.sum(axis=1)
    pr_area = table.sum(axis=0)
    gt_ids = np.flatnonzero(gt_area[1:]) + 1
    pr_ids = np.flatnonzero(pr_area[1:]) + 1
    if len(gt_ids) == 0 and len(pr_ids) == 0:
        return 1.0

    inter = table[1:, 1:]

    def side(ids, areas, other_areas, overlaps):
        total = areas[ids].sum()
        if total == 0:
            return 0.0
        acc = 0.0
        for i in ids:
            row = overlaps[i - 1]
            if row.size == 0 or row.max() == 0:
                continue
            j = int(np.argmax(row))  # first max -> lowest partner id
            acc += areas[i] / total * (2.0 * row[j] / (areas[i] + other_areas[j + 1]))
        return acc

    return 0.5 * (side(gt_ids, gt_area, pr_area, inter) + side(pr_ids, pr_area, gt_area, inter.T))


def aji(pred, gt):
    """Aggregated Jaccard Index.

    Ground-truth objects are visited in ascending id order; each takes the
    still-unused prediction with the largest intersection (ties go to the
    larger prediction, then the lower id).  A ground-truth object with no
    overlapping unused prediction adds only its own area to the union.
    Predictions never matched add their area to the denominator.
    """
    pred, gt = _check_pair(pred, gt)
    table = _overlap_table(pred, gt)
    gt_area = table.sum(axis=1)
    pr_area = table.sum(axis=0)
    gt_ids = np.flatnonzero(gt_area[1:]) + 1
    if len(gt_ids) == 0:
        raise ValueError("AJI is undefined for an empty ground truth")
    pr_ids = np.flatnonzero(pr_area[1:]) + 1
    used = np.zeros(len(pr_area), dtype=bool)
    num = 0
    den = 0
    for i in gt_ids:
        best, best_key = None, None
        for j in pr_ids:
            if used[j] or table[i, j] == 0:
                continue
            key = (table[i, j], pr_area[j], -j)
            if best_key is None or key > best_key:
                best, best_key = j, key
        if best is None:
            den += gt_area[i]
            continue
        used[best] = True
        num += table[i, best]
        den += gt_area[i] + pr_area[best] - table[i, best]
    den += sum(int(pr_area[j]) for j in pr_ids if not used[j])
    return float(num) / float(den)


def object_scores(pred, gt):
    return ObjectScores(object_dice(pred, gt), aji(pred, gt))


def match_points(pred, gt, radius):
    """Match predicted to ground-truth points one-to-one within ``radius``.

    The matching maximises the number of pairs; among maximum matchings the
    one with the smallest total distance is chosen.

    Returns
    -------
    tp, fp, fn : int
    matching : list of (pred_index, gt_index)
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pred = as_points(pred).astype(np.float64)
    gt = as_points(gt).astype(np.float64)
    if len(pred) == 0 or len(gt) == 0:
        return 0, len(pred), len(gt), []
    dist = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    ok = dist <= radius
    k = min(len(pred), len(gt))
    # every admissible pair costs < 1/k, so cardinality dominates the objective
    cost = np.where(ok, dist / (radius * (k + 1)), 1.0)
    rows, cols = linear_sum_assignment(cost)
    matching = sorted((int(r), int(c)) for r, c in zip(rows, cols) if ok[r, c])
    tp = len(matching)
    return tp, len(pred) - tp, len(gt) - tp, matching


def detection_scores(pred_sets, gt_sets, radius):
    """Micro-averaged detection P/R/F1 and mean absolute count error over images."""
    pred_sets = list(pred_sets)
    gt_sets = list(gt_sets)
    if len(pred_sets) != len(gt_sets):
        raise ValueError("prediction and ground-truth lists differ in length")
    tp = fp = fn = 0
    count_err = []
    for p, g in zip(pred_sets, gt_sets):
        t, f_p, f_n, _ = match_points(p, g, radius)
        tp, fp, fn = tp + t, fp + f_p, fn + f_n
        count_err.append(abs(len(as_points(p)) - len(as_points(g))))
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) else 1.0
    mp = float(np.mean(count_err)) if count_err else 0.0
    return DetectionScores(precision, recall, f1, mp, float(radius), tp, fp, fn)
