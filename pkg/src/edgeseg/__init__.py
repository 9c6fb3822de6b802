"""Edge-based self-supervision for semi-supervised few-shot cell
segmentation: Canny edge maps as proxy targets for unlabelled images,
joint training of a shared-encoder dual-decoder network, K-shot
fine-tuning, and an episodic IoU evaluation harness."""

from .corpus import Sample, SplitManifest, SourceCorpus, SyntheticConfig, build_split_manifest, generate_synthetic_dataset, load_sample
from .edgemaps import CannyConfig, EdgeMap, canny_edges, foreground_weight, precompute_edge_targets
from .eval import FewShotEpisode, MetricsReport, aggregate_results, binary_iou, evaluate_episode, sample_episodes
from .model import ArchConfig, DualDecoderNet, init_model
from .objectives import consistency_loss, entropy_loss, rotation_loss, weighted_bce
from .training import FinetuneConfig, TrainConfig, finetune, joint_train, pretrain_rotation, train_supervised, train_with_regularizer

__all__ = [
    "ArchConfig",
    "CannyConfig",
    "DualDecoderNet",
    "EdgeMap",
    "FewShotEpisode",
    "FinetuneConfig",
    "MetricsReport",
    "Sample",
    "SourceCorpus",
    "SplitManifest",
    "SyntheticConfig",
    "TrainConfig",
    "aggregate_results",
    "binary_iou",
    "build_split_manifest",
    "canny_edges",
    "consistency_loss",
    "entropy_loss",
    "evaluate_episode",
    "finetune",
    "foreground_weight",
    "generate_synthetic_dataset",
    "init_model",
    "joint_train",
    "load_sample",
    "precompute_edge_targets",
    "pretrain_rotation",
    "rotation_loss",
    "sample_episodes",
    "train_supervised",
    "train_with_regularizer",
    "weighted_bce",
]
