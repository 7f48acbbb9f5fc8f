"""Differentiable 3D Gaussian splatting with an orthographic bird's-eye-view
camera, multi-view scene fitting, and a BEV segmentation head.

The library is organized bottom-up:

``core``        Gaussian/Scene/Camera types and activations
``projection``  3D -> 2D footprint projection (perspective and orthogonal)
``rasterizer``  depth-sorted tiled compositing plus a naive reference renderer
``gradients``   analytic backward pass and finite-difference validation
``losses``      photometric, depth, feature and BEV supervision terms
``optim``       Adam, multi-view scene fitting, depth-based initialization
``synth``       procedural scenes with analytic ground-truth teachers
``bev``         BEV camera, segmentation head, staged training, IoU
``sceneio``     bit-exact binary formats for scenes, images and maps
"""

from .core import (ActivatedGaussian, Camera, DegenerateRotationError, Gaussian,
                   RenderOutput, Scene, activate, look_at_pose,
                   ORTHOGONAL, PERSPECTIVE)
from .projection import (Gaussian2D, project_orthogonal, project_perspective,
                         regularize_cov2d, world_to_camera)
from .rasterizer import (RenderConfig, TileGrid, alpha_composite, evaluate_alpha,
                         render, render_naive_oracle)
from .gradients import BufferGrads, GaussianGrads, finite_diff_check, render_backward
from .losses import (LossConfig, NormalizedDepth, loss_bev, loss_center_l2,
                     loss_depth_l1, loss_depth_silog, loss_feature_cosine,
                     loss_focal, loss_offset_l1, loss_render_mse, loss_total)
from .optim import (AdamState, FitConfig, LearningRates, StageConfig, adam_step,
                    fit_scene, init_scene_from_depth)
from .synth import (GroundTruthBundle, MaskSet, SceneSpec, generate_scene,
                    gt_bev_rasterize)
from .bev import (BevConfig, BevPrediction, SegHead, height_sweep, iou,
                  make_bev_camera, render_bev_features, seg_backward, seg_forward,
                  train_stage2, train_stage3_joint)
from .sceneio import load_map, load_scene, save_image, save_map, save_scene

__version__ = "0.1.0"
