"""Incremental visibility-aware volumetric 3D reconstruction.

Posed camera fragments stream into a coarse-to-fine sparse TSDF volume.
Each fragment builds a local feature volume, weighs views by predicted
visibility, sparsifies voxels along camera rays, and merges into a
persistent global volume through a per-voxel recurrent update.  The final
surface is extracted with marching cubes and scored against analytic
ground truth.
"""

from .errors import (
    ConfigError,
    InvalidInputError,
    MeshIOError,
    RayfusionError,
    SidecarFormatError,
)
from .fragments import Fragment, FrameRecord, assemble_fragments, select_keyframes
from .geometry import CameraIntrinsics, CameraPose, SparseVoxelGrid, VoxelGridSpec
from .globalfuse import GlobalVolume, GruParams, compose_residual, gru_fuse
from .localfuse import (
    HeuristicHead,
    HeuristicVisibilityPredictor,
    OracleHead,
    OracleVisibilityPredictor,
    pairwise_similarity,
    predict_visibility,
)
from .mesh import TriangleMesh, export_obj, export_ply, marching_cubes, read_ply
from .metrics import ReconMetrics, compute_metrics, sample_mesh
from .pipeline import PipelineConfig, Reconstructor, load_config, run_pipeline
from .sparsify import select_window, sparsify_fragment
from .synth import GroundTruthScene, SceneBundle, builtin_scene, load_scene_file

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "ConfigError",
    "Fragment",
    "FrameRecord",
    "GlobalVolume",
    "GroundTruthScene",
    "GruParams",
    "HeuristicHead",
    "HeuristicVisibilityPredictor",
    "InvalidInputError",
    "MeshIOError",
    "OracleHead",
    "OracleVisibilityPredictor",
    "PipelineConfig",
    "RayfusionError",
    "ReconMetrics",
    "Reconstructor",
    "SceneBundle",
    "SidecarFormatError",
    "SparseVoxelGrid",
    "TriangleMesh",
    "VoxelGridSpec",
    "assemble_fragments",
    "builtin_scene",
    "compose_residual",
    "compute_metrics",
    "export_obj",
    "export_ply",
    "gru_fuse",
    "load_config",
    "load_scene_file",
    "marching_cubes",
    "pairwise_similarity",
    "predict_visibility",
    "read_ply",
    "run_pipeline",
    "sample_mesh",
    "select_keyframes",
    "select_window",
    "sparsify_fragment",
]
