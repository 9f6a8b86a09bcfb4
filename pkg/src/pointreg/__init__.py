"""Point-cloud registration via learned correspondences and sample consensus."""

from .attention import AttentionWeights, cgconv, cross_attention, self_attention
from .encoder import EncoderWeights, KeyPointSet, encode, fp_layer, sa_layer
from .estimation import (
    PipelineConfig,
    RansacConfig,
    RegistrationFailureError,
    RegistrationResult,
    StageError,
    adaptive_iterations,
    count_inliers,
    icp_refine,
    ransac_register,
    register_pair,
)
from .geometry import (
    InsufficientPointsError,
    PointCloud,
    RegistrationMetrics,
    RigidTransform,
    apply_transform,
    compose,
    evaluate_transform,
    farthest_point_sample,
    invert,
    knn,
    overlap_ratio,
    radius_neighbors,
    rotation_error,
    translation_error,
    voxel_downsample,
)
from .io import load_cloud, load_freg, load_ply, save_cloud, save_freg, save_ply
from .matching import (
    CorrespondenceSet,
    extract_correspondences,
    match_probability_map,
)
from .model import (
    ModelConfig,
    ModelWeights,
    desk_config,
    full_config,
    init_model,
    named_parameters,
    tiny_config,
)
from .procrustes import DegenerateCorrespondencesError, fit_rigid, residual_error
from .scenes import (
    SceneConfig,
    ScenePair,
    SensorModel,
    dataset_load,
    dataset_save,
    dataset_statistics,
    generate_dataset,
    generate_scene,
)
from .training import (
    CorrespondenceLabels,
    TrainConfig,
    augment,
    correspondence_labels,
    loss,
    loss_gradient,
    train,
)
from .weights_io import load_model, save_model

__version__ = "0.1.0"
