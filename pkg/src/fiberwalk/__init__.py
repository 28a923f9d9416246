"""fiberwalk: equivalence-class exploration of small transformer networks.

The output metric of a network is pulled back through the exact Jacobian to
the input or embedding space, eigendecomposed into null and non-null
directions, and integrated along either to stay inside one equivalence class
(SiMEC) or to hop across classes (SiMExp). Pullback eigenvalues double as a
per-segment feature-importance score, and explored embeddings decode back to
images through the pseudoinverse of the patch projection.
"""
__version__ = "0.1.0"

from .attribution import (GroundTruth, ImportanceMap, cosine_similarity_eval,
                          feature_importance, importance_heatmap,
                          load_ground_truth)
from .data import (Dataset, FilterReport, IdxFormatError, load_idx,
                   synthetic_digits, variance_filter, write_idx)
from .explore import (ExplorationConfig, ExplorationError, FeasibleBounds,
                      StepRecord, Trajectory, load_trajectory,
                      perturbation_baseline, project_feasible, run_exploration,
                      save_trajectory, simec_delta, simec_step, simexp_delta,
                      simexp_step)
from .geometry import (Curve, DegenerateMetricError, MetricDecomposition,
                       MetricError, PullbackMetric, curve_energy,
                       curve_pseudolength, eigen_split,
                       pseudodistance_upper_bound, pullback_metric,
                       pushforward_length)
from .interpret import (DecodedBatch, PredictionSplit, decode_trajectory,
                        embedding_bounds, invert_patch_embedding,
                        prediction_trend_csv, split_predictions)
from .modelio import ModelFormatError, load_model, model_checksum, save_model
from .network import (Activations, Network, NetworkError, build_preset,
                      build_tiny_vit, evaluate, finite_diff_jacobian, forward,
                      jacobian, jvp, jvp_block, subnetwork, VIT_PRESETS)
from .seeding import rng_stream
from .train import (TrainingDiverged, TrainReport, accuracy, clone_network,
                    train_tiny_vit)

__all__ = [
    "Activations", "Curve", "Dataset", "DecodedBatch", "DegenerateMetricError",
    "ExplorationConfig", "ExplorationError", "FeasibleBounds", "FilterReport",
    "GroundTruth", "IdxFormatError", "ImportanceMap", "MetricDecomposition",
    "MetricError", "ModelFormatError", "Network", "NetworkError",
    "PredictionSplit", "PullbackMetric", "StepRecord", "TrainReport",
    "TrainingDiverged", "Trajectory", "VIT_PRESETS", "accuracy",
    "build_preset", "build_tiny_vit", "clone_network", "cosine_similarity_eval",
    "curve_energy", "curve_pseudolength", "decode_trajectory", "eigen_split",
    "embedding_bounds", "evaluate", "feature_importance",
    "finite_diff_jacobian", "forward", "importance_heatmap",
    "invert_patch_embedding", "jacobian", "jvp", "jvp_block", "load_ground_truth",
    "load_idx", "load_model", "load_trajectory", "model_checksum",
    "perturbation_baseline", "prediction_trend_csv", "project_feasible",
    "pseudodistance_upper_bound", "pullback_metric", "pushforward_length",
    "rng_stream", "run_exploration", "save_model", "save_trajectory",
    "simec_delta", "simec_step", "simexp_delta", "simexp_step",
    "split_predictions", "subnetwork", "synthetic_digits", "train_tiny_vit",
    "variance_filter", "write_idx", "__version__",
]
