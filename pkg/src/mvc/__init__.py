"""Controllable multi-view diffusion and text-to-3D generation, desk scale.

A small pixel-space multi-view denoiser with cross-view attention serves as
the frozen base; a zero-connected control branch conditions it on edge maps
and relative camera poses; hybrid score distillation (single-view prior at
random views, controlled multi-view prior at the four canonical views)
optimizes an SDF scene which is then meshed and textured.
"""

from .backbone import ConditioningVectors, ModelConfig, MultiViewUNet, timestep_embedding
from .cameras import CameraPose, CanonicalViewSet, canonical_views, look_at, relative_pose, sample_camera
from .config import RunConfig, load_config
from .control import ControlBranch, ControlledDenoiser, ControlEmbeddings
from .data import ConditionImage, DataConfig, MultiViewBatch, PrimitiveScene, edge_map, make_scene, next_batch, render_scene
from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    add_noise,
    build_schedule,
    cfg_combine,
    cfg_rescale,
    ddim_step,
    diffusion_loss,
    predict_x0,
)
from .distill import (
    AnnealRange,
    GuidanceContext,
    HybridWeights,
    anneal_range,
    hybrid_step,
    nfsd_gradient,
    sds_gradient,
    x0_recon_gradient,
)
from .surface import ExtractedMesh, SurfaceModel, eikonal_loss, extract_mesh, render_mesh, volume_render
from .tokens import PromptTokens

__version__ = "0.1.0"
