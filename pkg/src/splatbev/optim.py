"""First-order optimization of raw Gaussian parameters: Adam, scene fitting,
and depth-based scene initialization.

Scene fitting performs render -> losses -> analytic backward -> Adam per
iteration against multi-view photometric, depth and feature supervision. It is
the direct-optimization stand-in for a feed-forward reconstruction network:
the Gaussian count is fixed at initialization (no densification or pruning).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import csv
import logging
import numpy as np

from .core import Camera, Scene, SH_C0, PERSPECTIVE
from .gradients import BufferGrads, GaussianGrads, render_backward
from .losses import (LossConfig, NormalizedDepth, loss_depth_l1, loss_depth_silog,
                     loss_feature_cosine, loss_render_mse, loss_total)
from .rasterizer import RenderConfig, render

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "scale_logs", "rotations", "opacity_logits",
                   "color_coeffs", "features")

FIT = "fit"
HEAD_ONLY = "head_only"
JOINT = "joint"


class DivergenceError(RuntimeError):
    """Optimization diverged (non-finite or runaway loss)."""


@dataclass
class AdamState:
    """First/second moment estimates and step counter for a set of arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: dict[str, float] | float,
              frozen: frozenset[str] = frozenset()) -> tuple[str, ...]:
    """One bias-corrected Adam update, in place.

    Frozen groups are left exactly unchanged. If any gradient is non-finite
    the whole step is rejected (parameters and state untouched) and a flag is
    returned.
    """
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            log.warning("rejecting optimizer step: non-finite gradient in %s", name)
            return (f"non-finite gradient in {name}: step rejected",)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return ()


@dataclass(frozen=True)
class LearningRates:
    """Per-parameter-group learning rates for scene fitting."""

    means: float
    scale_logs: float = 5e-3
    rotations: float = 5e-3
    opacity_logits: float = 5e-2
    color_coeffs: float = 2.5e-3
    features: float = 2.5e-3

    @classmethod
    def for_extent(cls, scene_extent: float) -> "LearningRates":
        return cls(means=1.6e-4 * scene_extent)

    def scaled(self, factor: float) -> "LearningRates":
        return LearningRates(**{k: getattr(self, k) * factor
                                for k in GAUSSIAN_GROUPS})

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in GAUSSIAN_GROUPS}


@dataclass(frozen=True)
class StageConfig:
    """Which training stage is running and what it is allowed to touch."""

    stage: str
    iterations: int
    frozen_groups: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.stage not in (FIT, HEAD_ONLY, JOINT):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == HEAD_ONLY:
            missing = set(GAUSSIAN_GROUPS) - set(self.frozen_groups)
            if missing:
                raise ValueError(
                    f"head_only stage must freeze all Gaussian groups; missing {sorted(missing)}")

    @classmethod
    def head_only(cls, iterations: int) -> "StageConfig":
        return cls(HEAD_ONLY, iterations, frozenset(GAUSSIAN_GROUPS))


class SceneOptimizer:
    """Adam over a scene's raw parameter groups, with quaternion renorm."""

    def __init__(self, scene: Scene, lrs: LearningRates,
                 frozen: frozenset[str] = frozenset(), grad_clip: float = 10.0):
        self.scene = scene
        self.lrs = lrs.as_dict()
        self.frozen = frozen
        self.grad_clip = grad_clip
        self.state = AdamState.for_params(scene.param_arrays())

    def step(self, grads: GaussianGrads) -> tuple[str, ...]:
        garrs = grads.arrays()
        if self.grad_clip > 0:
            norm = grads.global_norm()
            if norm > self.grad_clip:
                grads.scale_(self.grad_clip / norm)
        flags = adam_step(self.scene.param_arrays(), garrs, self.state,
                          self.lrs, self.frozen)
        if not flags and "rotations" not in self.frozen:
            self.scene.normalize_rotations()
        return flags


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 500
    loss: LossConfig = field(default_factory=LossConfig)
    lrs: LearningRates | None = None     # None: derive from scene extent
    render: RenderConfig = field(default_factory=RenderConfig)
    grad_clip: float = 10.0
    divergence_limit: float = 1e6
    depth_alpha_min: float = 0.5


CURVE_COLUMNS = ("iteration", "loss_render", "loss_depth_l1", "loss_depth_silog",
                 "loss_feature", "loss_total")


@dataclass
class FitResult:
    scene: Scene
    curve: np.ndarray  # (iterations, len(CURVE_COLUMNS))
    flags: tuple[str, ...] = ()


def scene_extent(scene: Scene) -> float:
    if len(scene) == 0:
        return 1.0
    span = scene.means.max(axis=0) - scene.means.min(axis=0)
    return max(float(np.linalg.norm(span)), 1.0)


def fit_scene(images: np.ndarray, depths: np.ndarray, depth_valid: np.ndarray,
              features: np.ndarray, cameras: list[Camera], init: Scene,
              config: FitConfig = FitConfig()) -> FitResult:
    """Fit Gaussian parameters to multi-view references by gradient descent.

    ``images`` is (k, H, W, 3), ``depths``/``depth_valid`` (k, H, W),
    ``features`` (k, H, W, C); all views share the camera list order. The
    total objective is the photometric MSE plus weighted depth L1, depth
    SILog and feature-cosine terms; depth terms see alpha-normalized rendered
    depth on pixels with alpha above ``depth_alpha_min``.
    """
    k = len(cameras)
    if k < 1:
        raise ValueError("need at least one view")
    if len(init) == 0:
        raise ValueError("initial scene is empty")
    if images.shape[0] != k or depths.shape[0] != k or features.shape[0] != k:
        raise ValueError("view count mismatch between references and cameras")

    scene = init.copy()
    lrs = config.lrs or LearningRates.for_extent(scene_extent(scene))
    opt = SceneOptimizer(scene, lrs, grad_clip=config.grad_clip)
    lc = config.loss
    curve = np.zeros((config.iterations, len(CURVE_COLUMNS)))
    flags: list[str] = []

    for it in range(config.iterations):
        outs = [render(scene, cameras[i], config.render) for i in range(k)]
        norm_depths = [NormalizedDepth.from_render(o, config.depth_alpha_min)
                       for o in outs]
        pred_color = np.stack([o.color for o in outs])
        pred_feat = np.stack([o.feature for o in outs])
        pred_depth = np.stack([nd.value for nd in norm_depths])
        depth_mask = np.stack([nd.valid for nd in norm_depths]) & depth_valid

        t_mse = loss_render_mse(pred_color, images)
        t_l1 = loss_depth_l1(pred_depth, depths, depth_mask)
        t_si = loss_depth_silog(pred_depth, depths, depth_mask)
        t_feat = loss_feature_cosine(pred_feat, features)
        total = loss_total(t_mse.value, t_l1.value, t_si.value, t_feat.value, lc)
        curve[it] = (it, t_mse.value, t_l1.value, t_si.value, t_feat.value, total)
        if not np.isfinite(total) or total > config.divergence_limit:
            raise DivergenceError(
                f"iteration {it}: total loss {total} "
                f"(render={t_mse.value}, l1={t_l1.value}, silog={t_si.value}, "
                f"feature={t_feat.value})")

        grads = GaussianGrads.zeros_like(scene)
        for i in range(k):
            d_norm = (lc.weight_depth_l1 * t_l1.grad[i]
                      + lc.weight_depth_silog * t_si.grad[i])
            d_depth_raw, d_alpha = norm_depths[i].backprop(d_norm)
            upstream = BufferGrads(
                color=t_mse.grad[i],
                feature=lc.weight_feature * t_feat.grad[i],
                depth=d_depth_raw,
                alpha=d_alpha,
            )
            grads.add_(render_backward(scene, cameras[i], upstream, config.render))
        step_flags = opt.step(grads)
        flags.extend(step_flags)

    return FitResult(scene=scene, curve=curve, flags=tuple(flags))


def write_loss_curve(path, curve: np.ndarray) -> None:
    """Write a fit loss curve as CSV (iteration plus each loss term)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in curve:
            writer.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def init_scene_from_depth(depths: np.ndarray, depth_valid: np.ndarray,
                          cameras: list[Camera], stride: int = 2,
                          images: np.ndarray | None = None,
                          feature_dim: int = 16) -> Scene:
    """Seed a scene by unprojecting a strided grid of valid depth pixels.

    Each sampled pixel becomes one Gaussian: mean at the unprojected point,
    isotropic scale of half the local pixel footprint, opacity logit 0, color
    matching the reference image (mid-gray without one), zero features.
    """
    means, scales, colors = [], [], []
    for i, cam in enumerate(cameras):
        rows = np.arange(0, cam.height, stride)
        cols = np.arange(0, cam.width, stride)
        jj, ii = np.meshgrid(cols, rows)
        ok = depth_valid[i][ii, jj]
        if not np.any(ok):
            continue
        ii, jj = ii[ok], jj[ok]
        z = depths[i][ii, jj]
        u = jj + 0.5
        v = ii + 0.5
        if cam.mode == PERSPECTIVE:
            mean_cam = np.stack([(u - cam.cx) / cam.fx * z,
                                 (v - cam.cy) / cam.fy * z, z], axis=1)
            footprint = 0.5 * stride * z / cam.fx
        else:
            mean_cam = np.stack([(u - cam.cx) / cam.fx,
                                 (v - cam.cy) / cam.fy, z], axis=1)
            footprint = np.full(z.shape, 0.5 * stride / cam.fx)
        means.append((mean_cam - cam.t) @ cam.R)
        scales.append(np.log(np.maximum(footprint, 1e-4)))
        if images is not None:
            colors.append(images[i][ii, jj])
        else:
            colors.append(np.full((ii.size, 3), 0.5))
    if not means:
        raise ValueError("no valid depth pixels to initialize from")
    means = np.concatenate(means)
    n = means.shape[0]
    scale_logs = np.repeat(np.concatenate(scales)[:, None], 3, axis=1)
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    sh0 = (np.concatenate(colors) - 0.5) / SH_C0
    return Scene(
        means=means,
        scale_logs=scale_logs,
        rotations=rotations,
        opacity_logits=np.zeros(n),
        color_coeffs=sh0[:, None, :],
        features=np.zeros((n, feature_dim)),
    )
