"""Multi-view stereo depth estimation with attention features and thin cost volumes."""

from .cost_volume import (CostVolume, FeatureVolume, build_feature_volume,
                          groupwise_correlation, variance_aggregate)
from .features import (FeatureExtractor, FeaturePyramid, LocalSelfAttention,
                       extract_features, local_self_attention)
from .fusion import FusionThresholds, PointCloud, fuse, geometric_filter, photometric_filter
from .geometry import (Camera, DepthHypothesisField, WarpResult, bilinear_sample,
                       plane_homography, project_pixel, sample_uniform_depths,
                       scale_camera, warp_by_depth_field, warp_by_homography)
from .losses import (LossWeights, depth_loss, feature_loss, multi_metric_loss,
                     neighbor_balance_loss, position_loss)
from .pipeline import (ForwardOutput, MVSNetwork, NetworkConfig, SceneSample,
                       TrainState, create_train_state, train_step)
from .regression import (CostRegularizer, DepthPrediction, ProbabilityVolume,
                         adaptive_range, estimate_uncertainty, regress_depth,
                         sample_adaptive_depths)
from .synthetic import (PlanePrimitive, SceneSpec, SpherePrimitive, SyntheticScene,
                        generate_synthetic_scene, random_scene_spec)

__version__ = "0.1.0"
