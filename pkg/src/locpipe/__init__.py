"""locpipe: sparse-map visual localization toolkit.

Builds and refines sparse 3D maps, retrieves and matches ingested image
features, and estimates 6-DoF query camera poses via cluster-wise robust
PnP with optional perceptual reranking and ICP refinement.
"""

from ._accel import BACKEND as accel_backend
from .colmap_io import (load_colmap_text, read_pose_file, save_colmap_text,
                        write_pose_file)
from .evaluate import EvalReport, evaluate, pose_error
from .features import LocalFeatureSet, MatchSet, load_features, save_features
from .geometry import PinholeCamera, RigidPose, compose, project, unproject
from .localization import (CameraCluster, Correspondence2D3D, PoseEstimate,
                           build_correspondences, cluster_candidates,
                           localize_clusterwise, pnp_ransac)
from .mapping import (PairList, PointUncertainty, observation_jacobian,
                      pairs_by_covisibility, pairs_by_global, pairs_by_pose,
                      pairs_by_sequence, point_information, refine_map,
                      triangulate)
from .matching import guided_pyramid_match, match_descriptors
from .perceptual import (default_encoder, perceptual_distance,
                         rerank_clusters_perceptual, warp_to_pose)
from .pose_refine import PointCloud, backproject_depth, icp_refine, kabsch_align
from .preprocess import MaskImage, ResizePlan, apply_mask, plan_resize, undistort_keypoints
from .retrieval import (Codebook, DescriptorIndex, GlobalDescriptor, fuse,
                        retrieve, rerank_by_matches, vlad_hard, vlad_soft)
from .scene import MapPoint, RegisteredImage, SparseMap, covisibility
from .synth import SceneSpec, SyntheticScene, generate_scene, write_scene

__version__ = "0.1.0"
