"""Desk-scale Gaussian splatting with an error-driven adaptive split operator."""

from .adc import (
    DensifyStats,
    SplitReport,
    accumulate_stats,
    adpsplit_step,
    clone,
    select,
    vanilla_densify,
    vanilla_split,
)
from .child_init import ChildProposal, init_child, optimal_t, pixel_ray
from .cross_view_merge import MergeGroup, cap_children, merge_groups, mergeable
from .error_partition import (
    ErrorMaps,
    ErrorRegion,
    band_map,
    erode,
    error_map,
    metric_map,
    partition,
    region_stats,
)
from .raster import (
    GradOutput,
    RenderOutput,
    Splat2D,
    project,
    psnr,
    render,
    render_backward,
)
from .scene import (
    AdpSplitConfig,
    Camera,
    Gaussian3D,
    Scene,
    covariance,
    load_cameras,
    load_scene,
    rgb_to_dc,
    save_cameras,
    save_scene,
    sh_to_rgb,
)

__version__ = "0.1.0"
