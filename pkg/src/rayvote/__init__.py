"""Occlusion-aware aggregation of multi-view image features into 3D feature point clouds."""

from .aggregation import (
    AGGREGATION_VOXEL_SIZE,
    MERGE_VOXEL_SIZE,
    DaConfig,
    FeaturePointCloud,
    RayProfile,
    RmaConfig,
    SparseFeatureVoxels,
    VolumeFeatures,
    da_aggregate,
    first_hitting_point,
    march_ray,
    march_rays,
    march_view,
    rma_aggregate,
    va_aggregate,
    volume_to_cloud,
    voxelize,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    FeatureMap,
    Ray,
    pixel_ray,
    project,
    sample_feature,
)
from .losses import RECON_LOSS_WEIGHT, total_loss
from .tsdf import (
    Box,
    HalfSpace,
    Intersection,
    Sphere,
    TsdfGrid,
    Union,
    bake,
    query_nearest,
    render_depth,
)

__version__ = "0.1.0"
