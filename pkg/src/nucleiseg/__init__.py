"""Label-free nuclei detection and segmentation.

Self-supervised pretraining yields activation maps that are clustered into
pseudo masks.  A detection network trained on those masks supplies points
and Voronoi labels, which in turn supervise an instance segmentation
network.
"""
from .config import ConfigError, PipelineConfig
from .core import RasterError, connected_components
from .data import DatasetManifest, ManifestError, SynthConfig, load_manifest, synth_dataset, synth_nuclei
from .detect import NucleiDetector
from .labels import local_maxima, threshold_trimap, voronoi_labels
from .metrics import aji, detection_scores, match_points, object_dice, pixel_scores
from .pipeline import PipelineResult, evaluate, run_pipeline
from .pseudo import PseudoMaskGenerator
from .saliency import SelfActivationMapper, colorize_heatmap, self_activation_map
from .segment import NucleiSegmenter, joint_loss
from .ssl import SelfSupervisedPretrainer, pretrain

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "PipelineConfig", "RasterError", "connected_components", "DatasetManifest",
    "ManifestError", "SynthConfig", "load_manifest", "synth_dataset", "synth_nuclei",
    "NucleiDetector", "local_maxima", "threshold_trimap", "voronoi_labels", "aji",
    "detection_scores", "match_points", "object_dice", "pixel_scores", "PipelineResult",
    "evaluate", "run_pipeline", "PseudoMaskGenerator", "SelfActivationMapper",
    "colorize_heatmap", "self_activation_map", "NucleiSegmenter", "joint_loss",
    "SelfSupervisedPretrainer", "pretrain",
]
