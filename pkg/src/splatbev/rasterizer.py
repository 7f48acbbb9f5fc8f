"""Depth-sorted alpha compositing of projected Gaussians.

Two render paths share one definition of the image:

* ``render``          tiled, compiled, optional per-pixel early termination;
* ``render_naive_oracle``  plain numpy, everyAussian at every pixel, no
                      tiling and no early termination.

Both composite the same per-(Gaussian, pixel) contributions in the same depth
order, so with early termination disabled they agree to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor
import numpy as np

from . import _kernels
from .core import Camera, RenderOutput, Scene, activate_scene, PERSPECTIVE
from .projection import (CUTOFF_RADIUS, ProjectedScene, cov2d_extent,
                         project_scene_arrays)

ALPHA_MAX = _kernels.ALPHA_MAX


@dataclass(frozen=True)
class RenderConfig:
    """Knobs for the tiled path. Defaults match the training pipeline."""

    tile_size: int = 16
    early_stop: bool = True
    stop_threshold: float = 1e-4
    workers: int = 1

    @property
    def effective_threshold(self) -> float:
        return self.stop_threshold if self.early_stop else 0.0


def evaluate_alpha(g2d, opacity: float, pixel) -> float:
    """Opacity-scaled Gaussian falloff at a pixel, clamped to ALPHA_MAX.

    Contributions beyond Mahalanobis radius 3 are exactly zero. ``g2d.cov2d``
    must be regularized (invertible).
    """
    d = np.asarray(pixel, dtype=np.float64) - g2d.mean2d
    q = float(d @ np.linalg.solve(g2d.cov2d, d))
    if q > CUTOFF_RADIUS**2:
        return 0.0
    return min(opacity * np.exp(-0.5 * q), ALPHA_MAX)


def alpha_composite(entries):
    """Front-to-back compositing of depth-sorted (alpha, color, feature, depth).

    Returns (color, feature, depth, T_final). Every entry's blend weight is
    T_i * alpha_i with T_1 = 1 and T_{i+1} = T_i (1 - alpha_i); color, feature
    and depth share the same weights. An empty list yields zeros and T = 1.
    """
    color = np.zeros(3)
    feature = None
    depth = 0.0
    T = 1.0
    for alpha, c, f, d in entries:
        if not 0.0 <= alpha <= ALPHA_MAX:
            raise ValueError(f"alpha {alpha} outside [0, {ALPHA_MAX}]")
        if feature is None:
            feature = np.zeros(np.asarray(f).shape[0])
        w = T * alpha
        color += w * np.asarray(c, dtype=np.float64)
        feature += w * np.asarray(f, dtype=np.float64)
        depth += w * float(d)
        T *= 1.0 - alpha
    if feature is None:
        feature = np.zeros(0)
    return color, feature, depth, T


@dataclass
class TileGrid:
    """Per-tile lists of (sorted) Gaussian indices whose cutoff box hits the tile.

    ``starts`` is CSR offsets of length n_tiles+1 into ``gauss``; within each
    tile the indices appear in depth order. The bounding boxes are pixel-index
    ranges (inclusive) covering the whole 3-sigma ellipse, so every
    contributing (Gaussian, pixel) pair is assigned.
    """

    tile_size: int
    n_tiles_x: int
    n_tiles_y: int
    starts: np.ndarray
    gauss: np.ndarray
    bx0: np.ndarray
    bx1: np.ndarray
    by0: np.ndarray
    by1: np.ndarray

    @classmethod
    def build(cls, proj: ProjectedScene, width: int, height: int,
              tile_size: int = 16) -> "TileGrid":
        m = proj.mean2d.shape[0]
        n_tx = max(1, -(-width // tile_size))
        n_ty = max(1, -(-height // tile_size))
        if m == 0:
            return cls(tile_size, n_tx, n_ty,
                       np.zeros(n_tx * n_ty + 1, dtype=np.int64),
                       np.zeros(0, dtype=np.int64),
                       *(np.zeros(0, dtype=np.int64) for _ in range(4)))
        eu, ev = cov2d_extent(proj.cov2d)
        u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
        # Pixel j's center is j + 0.5; it is inside the box iff |j+0.5-u| <= eu.
        bx0 = np.ceil(u - eu - 0.5).astype(np.int64)
        bx1 = np.floor(u + eu - 0.5).astype(np.int64)
        by0 = np.ceil(v - ev - 0.5).astype(np.int64)
        by1 = np.floor(v + ev - 0.5).astype(np.int64)
        np.clip(bx0, 0, width - 1, out=bx0)
        np.clip(bx1, -1, width - 1, out=bx1)
        np.clip(by0, 0, height - 1, out=by0)
        np.clip(by1, -1, height - 1, out=by1)
        visible = (bx0 <= bx1) & (by0 <= by1)

        tx0 = bx0 // tile_size
        tx1 = bx1 // tile_size
        ty0 = by0 // tile_size
        ty1 = by1 // tile_size
        counts = np.where(visible, (tx1 - tx0 + 1) * (ty1 - ty0 + 1), 0)
        total = int(counts.sum())
        offsets = np.concatenate([[0], np.cumsum(counts)])
        pair_g = np.repeat(np.arange(m, dtype=np.int64), counts)
        rank = np.arange(total, dtype=np.int64) - offsets[pair_g]
        span_x = (tx1 - tx0 + 1)[pair_g]
        tile_x = tx0[pair_g] + rank % span_x
        tile_y = ty0[pair_g] + rank // span_x
        tile_id = tile_y * n_tx + tile_x
        order = np.argsort(tile_id, kind="stable")  # keeps depth order per tile
        gauss = pair_g[order]
        starts = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
        np.add.at(starts, tile_id + 1, 1)
        np.cumsum(starts, out=starts)
        return cls(tile_size, n_tx, n_ty, starts, gauss, bx0, bx1, by0, by1)


@dataclass
class RenderState:
    """Everything the kernels need, derived deterministically from scene+camera."""

    proj: ProjectedScene
    grid: TileGrid
    inv_a: np.ndarray
    inv_b: np.ndarray
    inv_c: np.ndarray
    opac: np.ndarray
    rgb: np.ndarray
    feat: np.ndarray
    view_dirs: np.ndarray | None


def _view_dirs(scene: Scene, camera: Camera) -> np.ndarray | None:
    """Unit directions used for degree-1 SH; None when only degree 0 is stored."""
    if scene.sh_basis < 4 or len(scene) == 0:
        return None
    if camera.mode == PERSPECTIVE:
        d = scene.means - camera.position
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.R[2], (len(scene), 3)).copy()


def prepare_render(scene: Scene, camera: Camera, config: RenderConfig) -> RenderState:
    dirs = _view_dirs(scene, camera)
    means, covs, opac_all, rgb_all, feat_all = activate_scene(scene, dirs)
    proj = project_scene_arrays(means, covs, camera)
    a = proj.cov2d[:, 0, 0]
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1]
    det = a * c - b * b  # > 0 by regularization
    grid = TileGrid.build(proj, camera.width, camera.height, config.tile_size)
    sel = proj.scene_index
    return RenderState(
        proj=proj, grid=grid,
        inv_a=np.ascontiguousarray(c / det),
        inv_b=np.ascontiguousarray(-b / det),
        inv_c=np.ascontiguousarray(a / det),
        opac=np.ascontiguousarray(opac_all[sel]),
        rgb=np.ascontiguousarray(rgb_all[sel]),
        feat=np.ascontiguousarray(feat_all[sel]),
        view_dirs=dirs,
    )


def _tile_shards(n_tiles: int, workers: int):
    workers = max(1, min(workers, n_tiles)) if n_tiles else 1
    bounds = np.linspace(0, n_tiles, workers + 1).astype(np.int64)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)
            if bounds[i + 1] > bounds[i]]


def render(scene: Scene, camera: Camera,
           config: RenderConfig = RenderConfig()) -> RenderOutput:
    """Tiled forward render of a scene into color/feature/depth/alpha buffers."""
    out = RenderOutput.zeros(camera.height, camera.width, scene.feature_dim)
    if len(scene) == 0:
        return out
    st = prepare_render(scene, camera, config)
    if st.proj.mean2d.shape[0] == 0:
        return out
    g = st.grid

    def run(lo, hi):
        _kernels.composite_tiles_forward(
            lo, hi, g.starts, g.gauss,
            st.proj.mean2d[:, 0], st.proj.mean2d[:, 1],
            st.inv_a, st.inv_b, st.inv_c, st.opac, st.rgb, st.feat,
            st.proj.depth, g.bx0, g.bx1, g.by0, g.by1,
            camera.height, camera.width, g.n_tiles_x, g.tile_size,
            config.effective_threshold,
            out.color, out.feature, out.depth, out.alpha)

    shards = _tile_shards(g.n_tiles_x * g.n_tiles_y, config.workers)
    if len(shards) == 1:
        run(*shards[0])
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            list(pool.map(lambda s: run(*s), shards))
    return out


def render_naive_oracle(scene: Scene, camera: Camera) -> RenderOutput:
    """Reference renderer: full per-pixel loop, no tiling, no early termination.

    Walks the depth-sorted Gaussians once, compositing each over the whole
    image (masked by the Mahalanobis cutoff), which performs exactly the
    per-pixel front-to-back recurrence in 64-bit arithmetic.
    """
    out = RenderOutput.zeros(camera.height, camera.width, scene.feature_dim)
    if len(scene) == 0:
        return out
    dirs = _view_dirs(scene, camera)
    means, covs, opac_all, rgb_all, feat_all = activate_scene(scene, dirs)
    proj = project_scene_arrays(means, covs, camera)
    m = proj.mean2d.shape[0]
    if m == 0:
        return out
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(camera.height) + 0.5
    px, py = np.meshgrid(cols, rows)
    T = np.ones((camera.height, camera.width))
    for k in range(m):
        i = proj.scene_index[k]
        cov = proj.cov2d[k]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        ia, ib, ic = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
        dx = px - proj.mean2d[k, 0]
        dy = py - proj.mean2d[k, 1]
        q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
        alpha = np.where(q <= CUTOFF_RADIUS**2,
                         np.minimum(opac_all[i] * np.exp(-0.5 * q), ALPHA_MAX),
                         0.0)
        w = T * alpha
        out.color += w[:, :, None] * rgb_all[i]
        out.feature += w[:, :, None] * feat_all[i]
        out.depth += w * proj.depth[k]
        T = T * (1.0 - alpha)
    out.alpha = 1.0 - T
    return out


def exact_config(config: RenderConfig | None = None) -> RenderConfig:
    """The same configuration with early termination disabled."""
    return replace(config or RenderConfig(), early_stop=False)
