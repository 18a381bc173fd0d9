"""``nucleiseg`` command line.

Exit status: 0 on success, 1 for configuration or usage errors, 2 when a
stage cannot run or fails.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, PipelineConfig
from .data import ManifestError
from .stages import OUTPUT_ENV, STAGES, SWEEP_PARAMS, StageError, Workspace, run_sweep, synth_data

logger = logging.getLogger("nucleiseg")

EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


HELP = {
    "synth-data": "write the synthetic dataset",
    "pretrain": "self-supervised encoder pretraining",
    "activate": "self-activation maps for the training images",
    "pseudomask": "tri-state pseudo masks from the activation maps",
    "train-ndn": "train the detection network on the pseudo masks",
    "detect": "probability maps, trimaps and nucleus points",
    "voronoi": "Voronoi labels from the detected points",
    "train-nsn": "train the segmentation network",
    "segment": "binary and instance masks for the test images",
    "evaluate": "metrics on the test split",
    "run": "every stage from pretraining to evaluation",
    "sweep": "repeat the chain over values of one parameter",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=("synthetic", "monuseg", "bcdata", "mask", "point"),
                        help="dataset profile and its default settings (default: synthetic)")
    common.add_argument("--config", help="YAML or JSON file layered over the profile defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one setting (repeatable)")
    common.add_argument("--out", help=f"output directory (env {OUTPUT_ENV}, default nucleiseg-out)")
    common.add_argument("--data", help="dataset root (default: <out>/data)")
    common.add_argument("--force", action="store_true", help="recompute even if up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="nucleiseg", description="Label-free nuclei detection and segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("synth-data", *STAGES, "run"):
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "evaluate":
            p.add_argument("--predictions", help="segment stage directory to score instead")
    p = sub.add_parser("sweep", parents=[common], help=HELP["sweep"])
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--until", choices=STAGES, default="evaluate",
                   help="last stage to run per value (default: evaluate)")
    return parser


def resolve_config(args):
    profile = args.profile or "synthetic"
    cfg = PipelineConfig.for_profile(profile)
    if args.config:
        cfg = PipelineConfig.load(args.config, base=cfg)
        if args.profile and cfg.data.profile != PipelineConfig.for_profile(args.profile).data.profile:
            raise ConfigError(f"--profile {args.profile} conflicts with data.profile="
                              f"{cfg.data.profile} in {args.config}")
    cfg.apply_overrides(args.overrides)
    return cfg


def _print_summary(summary):
    keys = ("pixel_iou", "pixel_f1", "dice_obj", "aji", "det_precision", "det_recall", "det_f1",
            "count_abs_err")
    print("  ".join(f"{k}={summary[k]:.4f}" for k in keys if summary.get(k) is not None))


def dispatch(args):
    cfg = resolve_config(args)
    if args.command == "synth-data":
        if cfg.data.profile != "synthetic":
            raise ConfigError("synth-data needs the synthetic profile")
        root = synth_data(cfg, args.out, args.data, force=args.force)
        print(root)
        return
    if cfg.data.profile == "synthetic" and not args.data and not cfg.data.root:
        synth_data(cfg, args.out, None)
    if args.command == "sweep":
        rows, path = run_sweep(cfg, args.param, args.values, args.out, args.data, args.until)
        print(path)
        failed = [r for r in rows if r["error"]]
        if failed:
            raise StageError(f"{len(failed)} of {len(rows)} sweep values failed; see {path}")
        return
    ws = Workspace(cfg, args.out, args.data, force=args.force)
    if args.command == "evaluate" and args.predictions:
        ws.evaluate_predictions(args.predictions)
    else:
        for stage in STAGES if args.command == "run" else (args.command,):
            was_done = ws.is_complete(stage) and not args.force
            out = ws.run(stage)
            print(f"{stage}: {'up-to-date' if was_done else 'done'} {out}")
    if args.command in ("run", "evaluate"):
        _print_summary(ws.summary())
        print(ws.output / "results.csv")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"nucleiseg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, ManifestError) as exc:
        print(f"nucleiseg: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report, don't dump a traceback
        logger.debug("failure", exc_info=True)
        print(f"nucleiseg: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
