"""Agent-aware temporal action proposal generation at desk scale.

Pipeline: fuse per-snippet agent/environment features with self-attention,
run a boundary generation network (boundary probabilities + dense
duration-start confidence maps), train with class-balanced losses, decode
proposals with Soft-NMS, and score AR@AN / AUC / mAP@tIoU.
"""

from .data import (ActionInstance, FeatureBundle, ModelConfig, VideoRecord,
                   seconds_to_snippets, snippets_to_seconds, tiou)
from .boundary import BoundaryOutputs, build_sampling_mask
from .supervision import SupervisionTargets, boundary_labels, duration_labels
from .losses import LossReport, l2_loss, total_loss, weighted_bll
from .inference import InferenceConfig, ProposalCandidate, hard_nms, pick_peaks, soft_nms
from .evaluation import EvalReport, auc_score, average_recall, map_at_tiou
from .io_synth import SynthSpec, generate, parse_annotations, read_bundle, write_bundle
from .training import TrainState, augment_dataset, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "ActionInstance", "FeatureBundle", "ModelConfig", "VideoRecord",
    "seconds_to_snippets", "snippets_to_seconds", "tiou",
    "BoundaryOutputs", "build_sampling_mask",
    "SupervisionTargets", "boundary_labels", "duration_labels",
    "LossReport", "l2_loss", "total_loss", "weighted_bll",
    "InferenceConfig", "ProposalCandidate", "hard_nms", "pick_peaks", "soft_nms",
    "EvalReport", "auc_score", "average_recall", "map_at_tiou",
    "SynthSpec", "generate", "parse_annotations", "read_bundle", "write_bundle",
    "TrainState", "augment_dataset", "grad_check", "train",
    "__version__",
]
