"""Disk-backed stage chain used by the command-line interface.

Every stage writes into ``<output>/stages/<stage>-<key>/`` where ``key``
hashes the stage's own settings together with the key of its upstream
stage and the content of the dataset.  A stage whose directory already
holds a ``meta.json`` with the same key is skipped, so sweeps only redo the
stages their parameter touches.  ``meta.json`` is written last and marks a
complete artifact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError
from .core import (connected_components, instance_centroids, read_image, read_instance_map,
                   read_points, read_tristate, write_image, write_instance_map, write_points,
                   write_tristate)
from .data import SPLITS, load_manifest, write_synthetic_dataset
from .detect import NucleiDetector
from .metrics import pixel_scores
from .pipeline import (RESULT_FIELDS, apply_postprocessing, evaluate, make_detector,
                       make_mapper, make_pretrainer, make_pseudo_generator, make_segmenter,
                       synth_config, write_results)
from .saliency import colorize_heatmap
from .segment import NucleiSegmenter
from .ssl import SelfSupervisedPretrainer

logger = logging.getLogger(__name__)

OUTPUT_ENV = "NUCLEISEG_OUTPUT"

STAGES = ("pretrain", "activate", "pseudomask", "train-ndn", "detect", "voronoi", "train-nsn",
          "segment", "evaluate")
UPSTREAM = {s: (STAGES[i - 1] if i else None) for i, s in enumerate(STAGES)}

_DETECT_POST = ("t_fg", "t_bg", "peak_radius", "min_prob", "smooth_sigma")
_SEGMENT_POST = ("threshold", "connectivity")


class StageError(RuntimeError):
    """A stage cannot run (missing input, mismatched data, failed step)."""


def _digest(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def own_settings(cfg, stage):
    """Configuration values a stage depends on directly."""
    d = cfg.to_dict()
    det, seg = d["detect"], d["segment"]
    return {
        "pretrain": {"ssl": d["ssl"], "deterministic": d["deterministic"]},
        "activate": {"saliency": d["saliency"]},
        "pseudomask": {"pseudo": d["pseudo"]},
        "train-ndn": {k: v for k, v in det.items() if k not in _DETECT_POST + ("seed_radius",)},
        "detect": {k: det[k] for k in _DETECT_POST},
        "voronoi": {"seed_radius": det["seed_radius"]},
        "train-nsn": {k: v for k, v in seg.items() if k not in _SEGMENT_POST},
        "segment": {k: seg[k] for k in _SEGMENT_POST},
        "evaluate": {"metrics": d["metrics"]},
    }[stage]


def split_hash(root, split):
    """Content hash of every file below ``root/split`` (or the flat layout)."""
    base = Path(root) / split
    if split == "train" and not (base / "images").is_dir() and (Path(root) / "images").is_dir():
        base = Path(root)
    h = hashlib.sha256()
    for sub in ("images", "masks", "points"):
        folder = base / sub
        if not folder.is_dir():
            continue
        for f in sorted(folder.iterdir()):
            if f.is_file() and not f.name.startswith("."):
                h.update(f"{sub}/{f.name}".encode())
                h.update(f.read_bytes())
    return h.hexdigest()[:16]


class Workspace:
    """Resolved configuration, dataset and output tree for one run."""

    def __init__(self, cfg, output=None, data_root=None, force=False):
        self.cfg = cfg
        self.output = Path(output or os.environ.get(OUTPUT_ENV) or "nucleiseg-out")
        root = data_root or cfg.data.root
        self.data_root = Path(root) if root else self.output / "data"
        self.force = force
        self._manifest = None
        self._images = {}
        self._keys = {}

    # -- dataset -----------------------------------------------------------

    @property
    def manifest(self):
        if self._manifest is None:
            if not self.data_root.is_dir():
                hint = " (run `nucleiseg synth-data` first)" if self.cfg.data.profile == "synthetic" else ""
                raise StageError(f"dataset directory {self.data_root} does not exist{hint}")
            self._manifest = load_manifest(self.data_root, self.cfg.data.profile)
            if not self._manifest.entries:
                raise StageError(f"no images found under {self.data_root}")
        return self._manifest

    def entries(self, split):
        return self.manifest.split(split)

    def images(self, split):
        if split not in self._images:
            self._images[split] = [e.load_image() for e in self.entries(split)]
        return self._images[split]

    def data_hashes(self):
        if "data" not in self._keys:
            self._keys["data"] = {s: split_hash(self.data_root, s) for s in ("train", "test")}
        return self._keys["data"]

    # -- keys and directories ---------------------------------------------

    def key(self, stage):
        if stage not in self._keys:
            up = UPSTREAM[stage]
            parent = self.key(up) if up else self.data_hashes()
            self._keys[stage] = _digest({"stage": stage, "upstream": parent,
                                         "own": own_settings(self.cfg, stage)})
        return self._keys[stage]

    def stage_dir(self, stage):
        return self.output / "stages" / f"{stage}-{self.key(stage)}"

    def is_complete(self, stage):
        meta = self.stage_dir(stage) / "meta.json"
        if not meta.exists():
            return False
        try:
            return json.loads(meta.read_text()).get("stage_key") == self.key(stage)
        except ValueError:
            return False

    def require(self, stage):
        if not self.is_complete(stage):
            raise StageError(
                f"missing output of stage '{stage}' ({self.stage_dir(stage)}); "
                f"run `nucleiseg {stage}` with the same configuration first")
        return self.stage_dir(stage)

    def _begin(self, stage):
        up = UPSTREAM[stage]
        if up:
            self.require(up)
        out = self.stage_dir(stage)
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        return out

    def _finish(self, stage, out, started, extra=None):
        meta = {
            "stage": stage,
            "stage_key": self.key(stage),
            "config_hash": self.cfg.hash,
            "data_hash": self.data_hashes(),
            "seed": self._seed(stage),
            "wall_time_s": round(time.time() - started, 3),
            "config": self.cfg.to_dict(),
        }
        meta.update(extra or {})
        tmp = out / ".meta.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
        os.replace(tmp, out / "meta.json")
        self.output.mkdir(parents=True, exist_ok=True)
        with open(self.output / "run.log", "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {stage} key={self.key(stage)} "
                     f"config={self.cfg.hash} seed={meta['seed']} "
                     f"wall={meta['wall_time_s']}s\n")

    def _seed(self, stage):
        c = self.cfg
        return {"pretrain": c.ssl.seed, "pseudomask": c.pseudo.seed, "train-ndn": c.detect.seed,
                "train-nsn": c.segment.seed}.get(stage)

    # -- running -----------------------------------------------------------

    def run(self, stage):
        """Run ``stage`` unless an identical artifact exists.  Returns its directory."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if self.is_complete(stage) and not self.force:
            logger.info("%s: up-to-date (%s)", stage, self.stage_dir(stage))
            return self.stage_dir(stage)
        started = time.time()
        out = self._begin(stage)
        extra = getattr(self, "_stage_" + stage.replace("-", "_"))(out)
        self._finish(stage, out, started, extra)
        logger.info("%s: done in %.1fs (%s)", stage, time.time() - started, out)
        return out

    def run_until(self, stage):
        out = None
        for s in STAGES[: STAGES.index(stage) + 1]:
            out = self.run(s)
        return out

    def _names(self, split):
        return [e.stem for e in self.entries(split)]

    def _stage_pretrain(self, out):
        pt = make_pretrainer(self.cfg).fit(self.images("train"))
        pt.save(out / "encoder.ckpt")
        pt.write_log(out / "log.csv")
        return {"final_loss": pt.loss_history_[-1] if pt.loss_history_ else None}

    def _pretrainer(self):
        return SelfSupervisedPretrainer.from_checkpoint(self.require("pretrain") / "encoder.ckpt")

    def _stage_activate(self, out):
        mapper = make_mapper(self.cfg, self._pretrainer(), self.images("train"))
        if mapper.weights_ is not None:
            np.save(out / "weights.npy", mapper.weights_)
        for name, amap in zip(self._names("train"), mapper.transform(self.images("train"))):
            write_image(out / f"{name}.png", amap, bits=16)
        return None

    def _stage_pseudomask(self, out):
        src = self.require("activate")
        gen = make_pseudo_generator(self.cfg, None)
        f1 = []
        for e, img in zip(self.entries("train"), self.images("train")):
            amap = read_image(src / f"{e.stem}.png")[..., 0]
            mask = gen.mask_from_activation(colorize_heatmap(amap), img)
            write_tristate(out / f"{e.stem}.png", mask)
            if e.gt_mask is not None:
                f1.append(pixel_scores(mask == 1, e.gt_mask > 0).f1)
        return {"pseudo_f1": float(np.mean(f1)) if f1 else None}

    def _stage_train_ndn(self, out):
        src = self.require("pseudomask")
        masks = [read_tristate(src / f"{n}.png") for n in self._names("train")]
        det = make_detector(self.cfg).fit(self.images("train"), masks)
        det.save(out / "detector.ckpt")
        return {"final_loss": det.loss_history_[-1]}

    def _detector(self):
        det = NucleiDetector.from_checkpoint(self.require("train-ndn") / "detector.ckpt")
        return apply_postprocessing(self.cfg, det)

    def _stage_detect(self, out):
        det = self._detector()
        for split in ("train", "test"):
            if not self.entries(split):
                continue
            probs = det.predict_proba(self.images(split))
            points = det.predict_points(probs=probs)
            for name, p, pts in zip(self._names(split), probs, points):
                write_image(out / split / "prob" / f"{name}.png", p, bits=16)
                write_points(out / split / "points" / f"{name}.csv", pts)
                if split == "train":
                    write_tristate(out / split / "trimap" / f"{name}.png", det.trimap(probs=[p])[0])
        return None

    def _stage_voronoi(self, out):
        src = self.require("detect")
        det = NucleiDetector()
        for e, img in zip(self.entries("train"), self.images("train")):
            pts = read_points(src / "train" / "points" / f"{e.stem}.csv", img.shape)
            vor = det.voronoi([img], points=[pts], seed_radius=self.cfg.detect.seed_radius)[0]
            write_tristate(out / f"{e.stem}.png", vor)
        return None

    def _stage_train_nsn(self, out):
        vdir = self.require("voronoi")
        ddir = self.stage_dir("detect")
        names = self._names("train")
        vor = [read_tristate(vdir / f"{n}.png") for n in names]
        tri = [read_tristate(ddir / "train" / "trimap" / f"{n}.png") for n in names]
        seg = make_segmenter(self.cfg).fit(self.images("train"), vor, tri)
        seg.save(out / "segmenter.ckpt")
        return {"final_loss": seg.loss_history_[-1]}

    def _stage_segment(self, out):
        seg = NucleiSegmenter.from_checkpoint(self.require("train-nsn") / "segmenter.ckpt")
        seg.set_params(threshold=self.cfg.segment.threshold,
                       connectivity=self.cfg.segment.connectivity)
        points_src = self.stage_dir("detect") / "test" / "points"
        (out / "points").mkdir(parents=True)
        probs = seg.predict_proba(self.images("test"))
        for name, p in zip(self._names("test"), probs):
            mask = p > seg.threshold
            write_image(out / "masks" / f"{name}.png", mask.astype(np.float64))
            write_instance_map(out / "instances" / f"{name}.png",
                               connected_components(mask, seg.connectivity))
            shutil.copyfile(points_src / f"{name}.csv", out / "points" / f"{name}.csv")
        return None

    def _stage_evaluate(self, out, predictions=None):
        seg_dir = Path(predictions) if predictions else self.require("segment")
        meta_path = seg_dir / "meta.json"
        if not meta_path.exists():
            raise StageError(f"{seg_dir} is not a complete output of stage 'segment'")
        meta = json.loads(meta_path.read_text())
        if meta.get("data_hash", {}).get("test") != self.data_hashes()["test"]:
            raise StageError(
                f"data split mismatch: predictions in {seg_dir} were made on test split "
                f"{meta.get('data_hash', {}).get('test')}, current test split is "
                f"{self.data_hashes()['test']}")
        entries = self.entries("test")
        names = [e.stem for e in entries]
        missing = [n for n in names if not (seg_dir / "instances" / f"{n}.png").exists()]
        if missing:
            raise StageError(f"{seg_dir} has no prediction for {len(missing)} test images "
                             f"(first: {missing[0]})")
        inst = [read_instance_map(seg_dir / "instances" / f"{n}.png") for n in names]
        pred_pts = [read_points(seg_dir / "points" / f"{n}.csv") for n in names]
        gt_inst = [e.gt_mask for e in entries]
        if any(m is None for m in gt_inst):
            gt_inst = None
        gt_pts = [_gt_points(e) for e in entries]
        if any(p is None for p in gt_pts):
            gt_pts = None
        rows, summary = evaluate(inst, pred_pts, gt_inst, gt_pts, names,
                                 self.cfg.metrics.match_radius, self.cfg.hash)
        write_results(out / "results.csv", rows, summary)
        shutil.copyfile(out / "results.csv", self.output / "results.csv")
        self.summary_ = summary
        return {"summary": {k: v for k, v in summary.items() if k != "image"}}

    def evaluate_predictions(self, predictions):
        """Evaluate an explicit segmentation output directory."""
        started = time.time()
        out = self._begin("evaluate")
        extra = self._stage_evaluate(out, predictions=predictions)
        self._finish("evaluate", out, started, extra)
        return out

    # -- convenience -------------------------------------------------------

    def summary(self):
        meta = json.loads((self.require("evaluate") / "meta.json").read_text())
        return meta["summary"]

    def pseudo_f1(self):
        meta = json.loads((self.require("pseudomask") / "meta.json").read_text())
        return meta.get("pseudo_f1")


def _gt_points(entry):
    if entry.gt_points is not None:
        return entry.gt_points
    if entry.gt_mask is not None:
        cents = instance_centroids(entry.gt_mask)
        return np.array([[round(r), round(c)] for r, c in cents.values()],
                        dtype=np.int64).reshape(-1, 2)
    return None


def synth_data(cfg, output=None, data_root=None, force=False):
    """Write the synthetic dataset described by ``cfg.data``; skip when present."""
    ws = Workspace(cfg, output, data_root)
    root = ws.data_root
    stamp = root / "DATASET.json"
    key = _digest(asdict(cfg.data) | {"root": None})
    if stamp.exists() and not force:
        try:
            if json.loads(stamp.read_text()).get("data_key") == key:
                logger.info("synth-data: up-to-date (%s)", root)
                return root
        except ValueError:
            pass
    if root.exists():
        for split in SPLITS:
            shutil.rmtree(root / split, ignore_errors=True)
    write_synthetic_dataset(root, cfg.data.n_train, cfg.data.n_test, synth_config(cfg),
                            seed=cfg.data.seed)
    stamp.write_text(json.dumps({"data_key": key, "config_hash": cfg.hash,
                                 "data": asdict(cfg.data)}, indent=2, sort_keys=True))
    logger.info("synth-data: wrote %d train / %d test images to %s",
                cfg.data.n_train, cfg.data.n_test, root)
    return root


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMS = {
    "beta": ("pseudo.beta", float),
    "lambda": ("segment.lambda_", float),
    "layer": ("saliency.layer", int),
    "proxy-task": ("ssl.task", str),
}
SWEEP_METRICS = ("pseudo_f1", "pixel_iou", "pixel_f1", "dice_obj", "aji", "det_f1", "count_abs_err")


def run_sweep(cfg, param, values, output=None, data_root=None, stop_after="evaluate"):
    """Run the stage chain once per value; returns the list of result rows.

    Rows of failed values carry the error message; the CSV and chart are
    written after every value so partial results survive an interruption.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key, typ = SWEEP_PARAMS[param]
    base = Workspace(cfg, output, data_root).output
    sweep_dir = base / "sweeps"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{param}-{_digest([cfg.hash, list(map(str, values)), stop_after])[:10]}"
    rows = []
    for raw in values:
        try:
            value = typ(raw)
            vcfg = cfg.copy().set(key, value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad sweep value {raw!r} for {param}: {exc}") from exc
        row = {"parameter": param, "value": value, "config_hash": vcfg.hash, "error": ""}
        try:
            ws = Workspace(vcfg, output, data_root)
            ws.run_until(stop_after)
            if ws.is_complete("pseudomask"):
                row["pseudo_f1"] = ws.pseudo_f1()
            if stop_after == "evaluate":
                row.update({k: ws.summary().get(k) for k in SWEEP_METRICS if k != "pseudo_f1"})
        except Exception as exc:  # noqa: BLE001 - keep going, record the failure
            logger.error("sweep %s=%s failed: %s", param, raw, exc)
            row["error"] = str(exc)
        rows.append(row)
        _write_sweep(sweep_dir / f"{stem}.csv", rows)
    _plot_sweep(sweep_dir / f"{stem}.png", rows, param)
    return rows, sweep_dir / f"{stem}.csv"


def _write_sweep(path, rows):
    fields = ["parameter", "value", *SWEEP_METRICS, "config_hash", "error"]
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    os.replace(tmp, path)


def _plot_sweep(path, rows, param):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if not r["error"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    categorical = any(isinstance(r["value"], str) for r in ok)
    xs = list(range(len(ok))) if categorical else [r["value"] for r in ok]
    for m in ("pseudo_f1", "pixel_iou", "aji", "det_f1"):
        ys = [r.get(m) for r in ok]
        if ys and all(y is not None and not (isinstance(y, float) and math.isnan(y)) for y in ys):
            ax.plot(xs, ys, marker="o", label=m)
    if categorical:
        ax.set_xticks(xs, [str(r["value"]) for r in ok])
    ax.set_xlabel(param)
    ax.set_ylabel("score")
    ax.grid(alpha=0.3)
    if ax.lines:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["STAGES", "StageError", "Workspace", "run_sweep", "synth_data", "split_hash",
           "read_results", "RESULT_FIELDS", "OUTPUT_ENV"]
