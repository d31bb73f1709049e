"""Differentiable triangle splatting: optimize an unstructured triangle
soup against posed images with a tile-based CPU rasterizer and analytic
gradients, then export the result as an ordinary mesh."""

__version__ = "0.1.0"

from .backward import (GradientSet, check_gradients, finite_difference_oracle,
                       render_backward)
from .config import (DensifyConfig, InitConfig, TrainConfig, indoor_config,
                     load_config, outdoor_config, preset)
from .density import (SampleCriterion, ViewStats, clone_with_noise,
                      densify_step, midpoint_subdivide, prune,
                      sample_candidates)
from .geometry import (CameraIntrinsics, CameraPose, PixelRect,
                       ProjectedTriangle, Triangle3D, WindowMode, incenter,
                       incenter_of, pixel_span, project_triangle,
                       signed_distance, tight_bbox, window_value)
from .losses import (LossWeights, distortion_loss, normal_loss, opacity_loss,
                     photometric_loss, size_loss, ssim, total_loss)
from .render import (FragmentData, ImageBuffer, RenderOutput, assign_tiles,
                     depth_sort, render)
from .scene_io import (SfmScene, compute_metrics, export_mesh, import_ply,
                       init_triangles, load_model, load_scene, save_model,
                       save_render)
from .soup import TriangleSoup
from .training import (AdamState, TrainView, adam_step, anneal_for_export,
                       train)

__all__ = [name for name in dir() if not name.startswith("_")]
