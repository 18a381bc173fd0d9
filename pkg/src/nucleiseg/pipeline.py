"""In-memory composition of the full label-free pipeline and its evaluation.

The CLI persists the same stages to disk; tests and sweeps call these
functions directly.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .core import check_instance_map
from .data import SynthConfig, split_seed, synth_dataset
from .detect import NucleiDetector
from .metrics import aji, detection_scores, object_dice, pixel_scores, scores_from_counts
from .pseudo import PseudoMaskGenerator
from .saliency import SelfActivationMapper
from .segment import NucleiSegmenter
from .ssl import SelfSupervisedPretrainer

logger = logging.getLogger(__name__)

RESULT_FIELDS = [
    "image", "pixel_iou", "pixel_f1", "pixel_tp", "pixel_fp", "pixel_fn", "dice_obj", "aji",
    "det_precision", "det_recall", "det_f1", "det_tp", "det_fp", "det_fn", "n_pred", "n_gt",
    "count_abs_err", "match_radius", "config_hash",
]


@dataclass
class Split:
    images: list
    instances: list | None = None
    points: list | None = None
    names: list | None = None

    def __post_init__(self):
        if self.names is None:
            self.names = [f"img_{i:04d}" for i in range(len(self.images))]


@dataclass
class PipelineResult:
    rows: list
    summary: dict
    artifacts: dict = field(default_factory=dict)


def synth_config(cfg):
    d = cfg.data
    return SynthConfig(
        image_size=(d.image_size, d.image_size),
        nuclei_count_range=(d.nuclei_count_min, d.nuclei_count_max),
        radius_range=(d.radius_min, d.radius_max),
        intensity_contrast=d.intensity_contrast,
        overlap_fraction=d.overlap_fraction,
        noise_sigma=d.noise_sigma,
    )


def synthetic_splits(cfg):
    """Train and test splits drawn from the synthetic generator."""
    sc = synth_config(cfg)
    train = synth_dataset(cfg.data.n_train, sc, seed=split_seed(cfg.data.seed, "train"))
    test = synth_dataset(cfg.data.n_test, sc, seed=split_seed(cfg.data.seed, "test"))

    def pack(triples, prefix):
        return Split([t[0] for t in triples], [t[1] for t in triples], [t[2] for t in triples],
                     [f"{prefix}_{i:04d}" for i in range(len(triples))])

    return pack(train, "train"), pack(test, "test")


# ---------------------------------------------------------------------------
# stage builders
# ---------------------------------------------------------------------------

def make_pretrainer(cfg):
    s = cfg.ssl
    return SelfSupervisedPretrainer(
        task=s.task, encoder=s.encoder, epochs=s.epochs, learning_rate=s.learning_rate,
        batch_size=s.batch_size, variance_weight=s.variance_weight, temperature=s.temperature,
        weights_path=s.weights_path, random_state=s.seed, deterministic=cfg.deterministic)


def make_mapper(cfg, pretrainer, images):
    s = cfg.saliency
    return SelfActivationMapper(pretrainer, layer=s.layer, target=s.target,
                                weighting=s.weighting, n_reference=s.n_reference,
                                polarity=s.polarity).fit(images)


def make_pseudo_generator(cfg, mapper):
    p = cfg.pseudo
    return PseudoMaskGenerator(mapper, beta=p.beta, n_clusters=p.n_clusters, middle=p.middle,
                               random_state=p.seed).fit()


def make_detector(cfg):
    d = cfg.detect
    return NucleiDetector(
        backbone=d.backbone, epochs=d.epochs, learning_rate=d.learning_rate,
        batch_size=d.batch_size, t_fg=d.t_fg, t_bg=d.t_bg, peak_radius=d.peak_radius,
        min_prob=d.min_prob, smooth_sigma=d.smooth_sigma, random_state=d.seed,
        deterministic=cfg.deterministic)


def make_segmenter(cfg):
    s = cfg.segment
    return NucleiSegmenter(
        backbone=s.backbone, epochs=s.epochs, learning_rate=s.learning_rate,
        batch_size=s.batch_size, lambda_=s.lambda_, use_voronoi=s.use_voronoi,
        threshold=s.threshold, connectivity=s.connectivity, random_state=s.seed,
        deterministic=cfg.deterministic)


def apply_postprocessing(cfg, detector):
    """Copy threshold and peak settings from ``cfg``; these need no retraining."""
    d = cfg.detect
    return detector.set_params(t_fg=d.t_fg, t_bg=d.t_bg, peak_radius=d.peak_radius,
                               min_prob=d.min_prob, smooth_sigma=d.smooth_sigma)


def detection_labels(cfg, detector, images):
    """Probability maps, trimaps, peak points and Voronoi labels for ``images``."""
    apply_postprocessing(cfg, detector)
    probs = detector.predict_proba(images)
    trimaps = detector.trimap(probs=probs)
    points = detector.predict_points(probs=probs)
    vor = detector.voronoi(images, points=points, seed_radius=cfg.detect.seed_radius)
    return probs, trimaps, points, vor


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(pred_instances, pred_points, gt_instances, gt_points, names, radius, config_hash=""):
    """Per-image metric rows plus an aggregate summary.

    Pixel IoU/F1 and detection P/R/F1 in the summary are micro-averaged
    (counts pooled over images); object Dice and AJI are per-image means.
    """
    rows = []
    for i, name in enumerate(names):
        pred = check_instance_map(pred_instances[i])
        gt = check_instance_map(gt_instances[i]) if gt_instances is not None else None
        row = {"image": name, "match_radius": radius, "config_hash": config_hash}
        if gt is not None:
            px = pixel_scores(pred > 0, gt > 0)
            row.update(pixel_iou=px.iou, pixel_f1=px.f1, pixel_tp=px.tp, pixel_fp=px.fp,
                       pixel_fn=px.fn, dice_obj=object_dice(pred, gt),
                       aji=aji(pred, gt) if gt.max() > 0 else math.nan)
        if gt_points is not None and pred_points is not None:
            det = detection_scores([pred_points[i]], [gt_points[i]], radius)
            row.update(det_precision=det.precision, det_recall=det.recall, det_f1=det.f1,
                       det_tp=det.tp, det_fp=det.fp, det_fn=det.fn,
                       n_pred=len(pred_points[i]), n_gt=len(gt_points[i]),
                       count_abs_err=abs(len(pred_points[i]) - len(gt_points[i])))
        rows.append(row)
    return rows, summarize(rows, pred_points, gt_points, radius, config_hash)


def summarize(rows, pred_points, gt_points, radius, config_hash=""):
    out = {"image": "summary", "match_radius": radius, "config_hash": config_hash}
    if rows and "pixel_tp" in rows[0]:
        px = scores_from_counts(sum(r["pixel_tp"] for r in rows), sum(r["pixel_fp"] for r in rows),
                                sum(r["pixel_fn"] for r in rows))
        out.update(pixel_iou=px.iou, pixel_f1=px.f1, pixel_tp=px.tp, pixel_fp=px.fp,
                   pixel_fn=px.fn, dice_obj=float(np.mean([r["dice_obj"] for r in rows])),
                   aji=float(np.nanmean([r["aji"] for r in rows])))
    if gt_points is not None and pred_points is not None:
        det = detection_scores(pred_points, gt_points, radius)
        out.update(det_precision=det.precision, det_recall=det.recall, det_f1=det.f1,
                   det_tp=det.tp, det_fp=det.fp, det_fn=det.fn,
                   n_pred=sum(len(p) for p in pred_points), n_gt=sum(len(g) for g in gt_points),
                   count_abs_err=det.mp)
    return out


def write_results(path, rows, summary):
    """One CSV row per image followed by the summary row; floats fixed to 10 digits."""
    def fmt(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.10g}"
        return v

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in list(rows) + [summary]:
            writer.writerow({k: fmt(r.get(k, "")) for k in RESULT_FIELDS})


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------

def run_pipeline(cfg=None, train=None, test=None, pretrainer=None, detector=None):
    """Run every stage and evaluate on ``test``.

    ``pretrainer`` and ``detector`` may be passed in to reuse upstream
    stages (e.g. in a sweep over the Voronoi weight).
    """
    cfg = cfg or PipelineConfig.for_profile("synthetic")
    if train is None or test is None:
        train, test = synthetic_splits(cfg)
    art = {}
    if pretrainer is None:
        pretrainer = make_pretrainer(cfg).fit(train.images)
    art["pretrainer"] = pretrainer
    if detector is None:
        mapper = make_mapper(cfg, pretrainer, train.images)
        pseudo = make_pseudo_generator(cfg, mapper).transform(train.images)
        art.update(mapper=mapper, pseudo_masks=pseudo)
        detector = make_detector(cfg).fit(train.images, pseudo)
    art["detector"] = apply_postprocessing(cfg, detector)
    _, trimaps, _, vor = detection_labels(cfg, detector, train.images)
    art.update(train_trimaps=trimaps, train_voronoi=vor)
    segmenter = make_segmenter(cfg).fit(train.images, vor, trimaps)
    art["segmenter"] = segmenter

    test_probs = detector.predict_proba(test.images)
    test_points = detector.predict_points(probs=test_probs)
    instances = segmenter.predict_instances(test.images)
    art.update(test_points=test_points, test_instances=instances)
    rows, summary = evaluate(instances, test_points, test.instances, test.points, test.names,
                             cfg.metrics.match_radius, cfg.hash)
    return PipelineResult(rows, summary, art)
