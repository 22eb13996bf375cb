"""Boundary-aware point cloud segmentation."""

from .boundary import (
    BoundaryField,
    BoundaryRule,
    BpmParams,
    annotate_boundary_gt,
    binarize,
    bpm_forward,
    bpm_loss,
    load_boundary,
    perturb_exchange_neighbor,
    perturb_random_flip,
    save_boundary,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cloud import CloudFormatError, PointCloud, load_cloud, save_cloud
from .config import ConfigError, RunConfig, default_config, parse_config
from .encode import (
    GemLayer,
    LayerConfig,
    augmented_aggregation,
    decoder_layer,
    encoder_layer,
    global_aggregation,
    interpolate_features,
    masked_local_aggregation,
)
from .geoconv import (
    GeometricKernel,
    KernelBank,
    gco_forward,
    kernel_init,
    kernel_response_field,
    load_field,
    save_field,
)
from .metrics import ConfusionMatrix, boundary_band_accuracy, boundary_scores, miou
from .network import ArchConfig, NetworkState, build_pyramid, init_network, network_forward
from .neighbors import farthest_point_sampling, knn_index, relative_positions
from .scenes import Primitive, SceneSpec, generate_scene, sample_scene_spec
from .train import (
    EvalReport,
    OptimizerState,
    TrainConfig,
    TrainingAbort,
    evaluate,
    grad_check,
    seg_loss,
    total_loss,
    train_loop,
)

__all__ = [
    "ArchConfig",
    "BoundaryField",
    "BoundaryRule",
    "BpmParams",
    "CheckpointError",
    "CloudFormatError",
    "ConfigError",
    "ConfusionMatrix",
    "EvalReport",
    "GemLayer",
    "GeometricKernel",
    "KernelBank",
    "LayerConfig",
    "NetworkState",
    "OptimizerState",
    "PointCloud",
    "Primitive",
    "RunConfig",
    "SceneSpec",
    "TrainConfig",
    "TrainingAbort",
    "annotate_boundary_gt",
    "augmented_aggregation",
    "binarize",
    "boundary_band_accuracy",
    "boundary_scores",
    "bpm_forward",
    "bpm_loss",
    "build_pyramid",
    "decoder_layer",
    "default_config",
    "encoder_layer",
    "evaluate",
    "farthest_point_sampling",
    "gco_forward",
    "generate_scene",
    "global_aggregation",
    "grad_check",
    "init_network",
    "interpolate_features",
    "kernel_init",
    "kernel_response_field",
    "knn_index",
    "load_boundary",
    "load_checkpoint",
    "load_cloud",
    "load_field",
    "masked_local_aggregation",
    "miou",
    "network_forward",
    "parse_config",
    "perturb_exchange_neighbor",
    "perturb_random_flip",
    "relative_positions",
    "sample_scene_spec",
    "save_boundary",
    "save_checkpoint",
    "save_cloud",
    "save_field",
    "seg_loss",
    "total_loss",
    "train_loop",
]
