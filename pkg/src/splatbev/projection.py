"""Projection of activated 3D Gaussians to 2D screen-space footprints.

Supports the standard perspective (first-order EWA linearization) and the
depth-independent orthogonal camera used for bird's-eye-view rendering. All
operations are pure; batch variants are vectorized over Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .core import Camera, ORTHOGONAL, PERSPECTIVE

# Anti-aliasing floor added to the diagonal of every projected covariance (px^2).
COV2D_FLOOR = 0.3

# A Gaussian influences pixels within this Mahalanobis radius of its 2D mean.
CUTOFF_RADIUS = 3.0


@dataclass(frozen=True)
class Gaussian2D:
    """Screen-space footprint of one projected Gaussian.

    mean2d  (u, v) pixel coordinates
    cov2d   2x2 symmetric screen covariance, pixels^2 (regularized: det > 0)
    depth   camera-space z, meters; also the compositing sort key
    index   original scene index, the deterministic tie-break for equal depths
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int = 0


def world_to_camera(mean: np.ndarray, cov: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Rigid change of frame: mean -> R mean + t, cov -> R cov R^T.

    Accepts a single Gaussian ((3,), (3,3)) or a batch ((N,3), (N,3,3)).
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if mean.ndim == 1:
        return R @ mean + t, R @ cov @ R.T
    return mean @ R.T + t, np.einsum("ij,njk,lk->nil", R, cov, R)


def orthogonal_jacobian(camera: Camera) -> np.ndarray:
    """2x3 Jacobian of the orthogonal pixel map; constant across space."""
    return np.array([[camera.fx, 0.0, 0.0], [0.0, camera.fy, 0.0]])


def perspective_jacobian(mean_cam: np.ndarray, camera: Camera) -> np.ndarray:
    """2x3 Jacobian of the pinhole pixel map evaluated at camera-space point(s).

    Accepts (3,) or (N, 3); returns (2, 3) or (N, 2, 3).
    """
    m = np.atleast_2d(np.asarray(mean_cam, dtype=np.float64))
    X, Y, Z = m[:, 0], m[:, 1], m[:, 2]
    J = np.zeros((m.shape[0], 2, 3))
    J[:, 0, 0] = camera.fx / Z
    J[:, 0, 2] = -camera.fx * X / (Z * Z)
    J[:, 1, 1] = camera.fy / Z
    J[:, 1, 2] = -camera.fy * Y / (Z * Z)
    return J[0] if np.asarray(mean_cam).ndim == 1 else J


def regularize_cov2d(cov2d: np.ndarray) -> np.ndarray:
    """Add the anti-aliasing floor to the diagonal; result is positive definite."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    out = cov2d.copy()
    out[..., 0, 0] += COV2D_FLOOR
    out[..., 1, 1] += COV2D_FLOOR
    return out


def project_orthogonal(mean_cam, cov_cam, camera: Camera, index: int = 0) -> Gaussian2D:
    """Project one camera-space Gaussian through the orthogonal camera.

    The pixel position (fx*X + cx, fy*Y + cy) and footprint are independent of
    depth; depth is reported for compositing order only.
    """
    if camera.mode != ORTHOGONAL:
        raise ValueError("camera mode must be orthogonal")
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    J = orthogonal_jacobian(camera)
    mean2d = np.array([camera.fx * mean_cam[0] + camera.cx,
                       camera.fy * mean_cam[1] + camera.cy])
    cov2d = regularize_cov2d(J @ np.asarray(cov_cam, dtype=np.float64) @ J.T)
    return Gaussian2D(mean2d=mean2d, cov2d=cov2d, depth=float(mean_cam[2]), index=index)


def project_perspective(mean_cam, cov_cam, camera: Camera, index: int = 0) -> Gaussian2D | None:
    """Project one camera-space Gaussian through the pinhole camera.

    Returns None when the Gaussian is culled by the near plane (Z <= near);
    this is a cull result, not an error.
    """
    if camera.mode != PERSPECTIVE:
        raise ValueError("camera mode must be perspective")
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    X, Y, Z = mean_cam
    if Z <= camera.near:
        return None
    mean2d = np.array([camera.fx * X / Z + camera.cx, camera.fy * Y / Z + camera.cy])
    J = perspective_jacobian(mean_cam, camera)
    cov2d = regularize_cov2d(J @ np.asarray(cov_cam, dtype=np.float64) @ J.T)
    return Gaussian2D(mean2d=mean2d, cov2d=cov2d, depth=float(Z), index=index)


@dataclass
class ProjectedScene:
    """Batch projection result for a whole scene, pre-culled and depth-sorted.

    Arrays are indexed in depth order (ascending, ties broken by original
    scene index); ``scene_index`` maps back to the scene.
    """

    mean2d: np.ndarray       # (M, 2)
    cov2d: np.ndarray        # (M, 2, 2) regularized
    depth: np.ndarray        # (M,)
    scene_index: np.ndarray  # (M,) int64
    mean_cam: np.ndarray     # (M, 3) camera-space means (kept for the backward pass)


def project_scene_arrays(means: np.ndarray, covs: np.ndarray, camera: Camera) -> ProjectedScene:
    """Project activated world-space Gaussians and sort them for compositing.

    Culling: perspective drops Z <= near; orthogonal drops Z < 0 (primitives
    behind, i.e. above, the top-down camera). No far cull in either mode.
    """
    n = means.shape[0]
    if n == 0:
        empty2 = np.zeros((0, 2))
        return ProjectedScene(empty2, np.zeros((0, 2, 2)), np.zeros(0),
                              np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
    mean_cam, cov_cam = world_to_camera(means, covs, camera.R, camera.t)
    Z = mean_cam[:, 2]
    if camera.mode == PERSPECTIVE:
        keep = Z > camera.near
    else:
        keep = Z >= 0.0
    idx = np.nonzero(keep)[0]
    mean_cam = mean_cam[idx]
    cov_cam = cov_cam[idx]
    Z = Z[idx]

    if camera.mode == PERSPECTIVE:
        u = camera.fx * mean_cam[:, 0] / Z + camera.cx
        v = camera.fy * mean_cam[:, 1] / Z + camera.cy
        J = perspective_jacobian(mean_cam, camera)
    else:
        u = camera.fx * mean_cam[:, 0] + camera.cx
        v = camera.fy * mean_cam[:, 1] + camera.cy
        J = np.broadcast_to(orthogonal_jacobian(camera), (idx.shape[0], 2, 3))
    cov2d = regularize_cov2d(np.einsum("nij,njk,nlk->nil", J, cov_cam, J))
    mean2d = np.stack([u, v], axis=1)

    order = np.argsort(Z, kind="stable")  # stable: equal depths keep index order
    return ProjectedScene(
        mean2d=np.ascontiguousarray(mean2d[order]),
        cov2d=np.ascontiguousarray(cov2d[order]),
        depth=np.ascontiguousarray(Z[order]),
        scene_index=np.ascontiguousarray(idx[order]),
        mean_cam=np.ascontiguousarray(mean_cam[order]),
    )


def cov2d_extent(cov2d: np.ndarray):
    """Per-axis bounding half-widths (eu, ev) of the cutoff ellipse.

    The ellipse {d : d^T cov^-1 d <= CUTOFF_RADIUS^2} extends exactly
    CUTOFF_RADIUS * sqrt(cov[0,0]) along u and CUTOFF_RADIUS * sqrt(cov[1,1])
    along v, so the axis-aligned box of these half-widths is the tight AABB:
    tile binning with it never drops a contributing pixel and wastes little on
    anisotropic footprints.
    """
    eu = CUTOFF_RADIUS * np.sqrt(np.maximum(cov2d[..., 0, 0], 0.0))
    ev = CUTOFF_RADIUS * np.sqrt(np.maximum(cov2d[..., 1, 1], 0.0))
    return eu, ev
