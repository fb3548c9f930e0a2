"""Factored voxel radiance fields with appearance-only style adaptation."""

from .camera import Camera, generate_rays, look_at
from .consistency import (
    FlowField,
    consistency_metric,
    eval_trajectory,
    read_flo,
    reprojection_flow,
    warp,
    write_flo,
)
from .errors import (
    CheckpointError,
    ContractViolation,
    DataError,
    InsufficientOverlapError,
    NumericalFailure,
    OutOfBoundsError,
    StyleTrfError,
)
from .grid import (
    GridGradients,
    VMGrid,
    decode_color,
    init_grid,
    l1_reg,
    sample_density,
    sample_feature,
    tv_loss,
    upsample,
)
from .optim import (
    AdamState,
    GradMask,
    RayBatch,
    TrainConfig,
    adam_step,
    desk_config,
    fit,
    loss_and_grads,
)
from .render import (
    RenderConfig,
    RenderOutput,
    composite,
    ray_aabb_clip,
    render_image,
    render_ray,
    render_rays,
)
from .scene import (
    Dataset,
    SyntheticSceneSpec,
    desk_scene,
    load_checkpoint,
    load_dataset,
    make_synthetic,
    save_checkpoint,
    save_dataset,
)
from .style import PriorSet, Strategy, adapt, render_priors, spiral_trajectory

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Camera",
    "CheckpointError",
    "ContractViolation",
    "DataError",
    "Dataset",
    "FlowField",
    "GradMask",
    "GridGradients",
    "InsufficientOverlapError",
    "NumericalFailure",
    "OutOfBoundsError",
    "PriorSet",
    "RayBatch",
    "RenderConfig",
    "RenderOutput",
    "Strategy",
    "StyleTrfError",
    "SyntheticSceneSpec",
    "TrainConfig",
    "VMGrid",
    "adam_step",
    "adapt",
    "composite",
    "consistency_metric",
    "decode_color",
    "desk_config",
    "desk_scene",
    "eval_trajectory",
    "fit",
    "generate_rays",
    "init_grid",
    "l1_reg",
    "load_checkpoint",
    "load_dataset",
    "look_at",
    "loss_and_grads",
    "make_synthetic",
    "ray_aabb_clip",
    "read_flo",
    "render_image",
    "render_priors",
    "render_ray",
    "render_rays",
    "reprojection_flow",
    "sample_density",
    "sample_feature",
    "save_checkpoint",
    "save_dataset",
    "spiral_trajectory",
    "tv_loss",
    "upsample",
    "warp",
    "write_flo",
]
