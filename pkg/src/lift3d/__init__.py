"""lift3d: single-frame 2D-to-3D keypoint lifting.

A hybrid graph/global attention network predicts a canonical 3D shape from
masked 2D keypoints; a masked orthographic alignment recovers orientation and
scale against a reference. Includes synthetic data generation, training,
evaluation, and a CLI (``lift3d --help``).
"""

from .core import (ConfigError, DatasetError, DegenerateGeometryError, EmptyMaskError,
                   InsufficientPointsError, LiftError, NumericFault, PreprocessRecord,
                   Sample, ShapeError, adjacency_to_edges, apply_mask, edges_to_adjacency,
                   normalize_scale, parse_kv_lines, preprocess, preprocess_arrays,
                   validate_sample, zero_center)
from .data import (Dataset, DatasetSpec, build_category, generate_category, load_dataset,
                   load_dataset_spec, make_dataset, make_ood_split, pad_batch, rig_subset,
                   save_dataset)
from .encoding import IndexEmbedding, RFFParams, encode_rff, init_rff_params
from .evaluate import (EvalReport, evaluate, mpjpe, pa_mpjpe, per_sample_mpjpe,
                       per_sample_pa_mpjpe)
from .model import (KeypointLifter, ModelConfig, backward, lift_sample, load_checkpoint,
                    save_checkpoint)
from .procrustes import AlignmentResult, align, solve_rotation, solve_scale
from .train import (EarlyStopper, GradCheckReport, PlateauScheduler, TrainConfig,
                    TrainHistory, fit, gradient_check, load_train_config,
                    make_optimizer, mse_loss)

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult", "ConfigError", "Dataset", "DatasetError", "DatasetSpec",
    "DegenerateGeometryError", "EarlyStopper", "EmptyMaskError", "EvalReport",
    "GradCheckReport", "IndexEmbedding", "InsufficientPointsError", "KeypointLifter",
    "LiftError", "ModelConfig", "NumericFault", "PlateauScheduler", "PreprocessRecord",
    "RFFParams", "Sample", "ShapeError", "TrainConfig", "TrainHistory",
    "adjacency_to_edges", "align", "apply_mask", "backward", "build_category",
    "edges_to_adjacency", "encode_rff", "evaluate", "fit", "generate_category",
    "gradient_check", "init_rff_params", "lift_sample", "load_checkpoint",
    "load_dataset", "load_dataset_spec", "load_train_config", "make_dataset",
    "make_ood_split", "make_optimizer", "mpjpe", "mse_loss", "normalize_scale",
    "pa_mpjpe", "pad_batch", "parse_kv_lines", "per_sample_mpjpe",
    "per_sample_pa_mpjpe", "preprocess", "preprocess_arrays", "rig_subset",
    "save_checkpoint", "save_dataset", "solve_rotation", "solve_scale",
    "validate_sample", "zero_center",
]
