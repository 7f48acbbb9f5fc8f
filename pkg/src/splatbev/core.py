"""Core scene types: anisotropic Gaussian primitives, scenes, cameras, raster buffers.

All numeric state is float64 numpy. Gaussians are stored with unconstrained raw
parameters (log-scales, opacity logit, unnormalized quaternion) so that gradient
steps can never leave the valid covariance/opacity manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

# Real spherical-harmonic basis constants (degree 0 and 1).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

PERSPECTIVE = "perspective"
ORTHOGONAL = "orthogonal"


class DegenerateRotationError(ValueError):
    """Raised when a quaternion has (near-)zero norm and defines no rotation."""


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||, raising DegenerateRotationError on zero-norm input."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateRotationError("quaternion norm is zero; rotation undefined")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert unit quaternion(s) (w, x, y, z) to rotation matrices.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3). The input is
    normalized first, so any non-zero quaternion is valid.
    """
    q = quat_normalize(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    """A single anisotropic 3D Gaussian primitive (raw, unactivated parameters).

    mean           world-frame center, meters, shape (3,)
    scale_log      log of per-axis standard deviations, shape (3,)
    rotation       quaternion (w, x, y, z) parameterizing orientation, shape (4,)
    opacity_logit  scalar; activated opacity is sigmoid(opacity_logit)
    color_coeffs   spherical-harmonic color coefficients, shape (B, 3) with
                   B = 1 (degree 0) or B = 4 (degrees 0-1)
    feature        distilled semantic feature vector, shape (C,)
    """

    mean: np.ndarray
    scale_log: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color_coeffs: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        for name, want in (("mean", (3,)), ("scale_log", (3,)), ("rotation", (4,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        cc = np.asarray(self.color_coeffs, dtype=np.float64)
        if cc.ndim != 2 or cc.shape[1] != 3 or cc.shape[0] not in (1, 4):
            raise ValueError(f"color_coeffs must be (1,3) or (4,3), got {cc.shape}")
        object.__setattr__(self, "color_coeffs", cc)
        object.__setattr__(
            self, "feature", np.asarray(self.feature, dtype=np.float64).reshape(-1)
        )
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))


@dataclass(frozen=True)
class ActivatedGaussian:
    """Gaussian after activation: covariance assembled, opacity/color mapped."""

    mean: np.ndarray      # (3,)
    cov: np.ndarray       # (3, 3) symmetric positive definite
    opacity: float        # in (0, 1)
    rgb: np.ndarray       # (3,) in [0, 1]
    feature: np.ndarray   # (C,)


def activate(gaussian: Gaussian, view_dir: np.ndarray | None = None) -> ActivatedGaussian:
    """Map raw Gaussian parameters to renderable quantities.

    Covariance is R * diag(exp(scale_log))^2 * R^T, opacity is the logistic of
    the opacity logit, and color is evaluated from the SH coefficients (the
    degree-1 term needs a unit view direction; without one only degree 0 is
    used). Pure and deterministic.
    """
    R = quat_to_rotmat(gaussian.rotation)
    s = np.exp(gaussian.scale_log)
    M = R * s[np.newaxis, :]
    cov = M @ M.T
    opacity = float(sigmoid(gaussian.opacity_logit))
    rgb = eval_sh_color(gaussian.color_coeffs[np.newaxis], None if view_dir is None
                        else np.asarray(view_dir, dtype=np.float64)[np.newaxis])[0]
    return ActivatedGaussian(
        mean=gaussian.mean.copy(),
        cov=cov,
        opacity=opacity,
        rgb=rgb,
        feature=gaussian.feature.copy(),
    )


def eval_sh_color(coeffs: np.ndarray, view_dirs: np.ndarray | None) -> np.ndarray:
    """Evaluate SH color for N Gaussians; coeffs (N, B, 3), view_dirs (N, 3) or None.

    Returns (N, 3) clamped to [0, 1]. Degree-1 contributions are added only
    when both the coefficients and view directions are present.
    """
    rgb = 0.5 + SH_C0 * coeffs[:, 0, :]
    if coeffs.shape[1] == 4 and view_dirs is not None:
        dx, dy, dz = view_dirs[:, 0:1], view_dirs[:, 1:2], view_dirs[:, 2:3]
        rgb = rgb - SH_C1 * dy * coeffs[:, 1, :] + SH_C1 * dz * coeffs[:, 2, :] \
            - SH_C1 * dx * coeffs[:, 3, :]
    return np.clip(rgb, 0.0, 1.0)


class Scene:
    """An ordered collection of Gaussians stored as stacked parameter arrays.

    List order carries no meaning (rendering depth-sorts); it only provides the
    deterministic tie-break identity of each primitive. All Gaussians share a
    feature dimension and an SH basis size.
    """

    __slots__ = ("means", "scale_logs", "rotations", "opacity_logits",
                 "color_coeffs", "features")

    def __init__(self, means, scale_logs, rotations, opacity_logits,
                 color_coeffs, features):
        self.means = np.ascontiguousarray(means, dtype=np.float64)
        self.scale_logs = np.ascontiguousarray(scale_logs, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        self.color_coeffs = np.ascontiguousarray(color_coeffs, dtype=np.float64)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        n = self.means.shape[0]
        if self.means.shape != (n, 3) or self.scale_logs.shape != (n, 3) \
                or self.rotations.shape != (n, 4) or self.opacity_logits.shape != (n,):
            raise ValueError("scene parameter arrays have inconsistent shapes")
        if self.color_coeffs.ndim != 3 or self.color_coeffs.shape[0] != n \
                or self.color_coeffs.shape[2] != 3 \
                or self.color_coeffs.shape[1] not in (1, 4):
            raise ValueError("color_coeffs must be (N, 1 or 4, 3)")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be (N, C)")

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian]) -> "Scene":
        if not gaussians:
            return cls.empty()
        dims = {g.feature.shape[0] for g in gaussians}
        if len(dims) != 1:
            raise ValueError(f"all Gaussians must share feature_dim, got {sorted(dims)}")
        bases = {g.color_coeffs.shape[0] for g in gaussians}
        if len(bases) != 1:
            raise ValueError("all Gaussians must share the SH basis size")
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            scale_logs=np.stack([g.scale_log for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            color_coeffs=np.stack([g.color_coeffs for g in gaussians]),
            features=np.stack([g.feature for g in gaussians]),
        )

    @classmethod
    def empty(cls, feature_dim: int = 16, sh_basis: int = 1) -> "Scene":
        return cls(
            means=np.zeros((0, 3)),
            scale_logs=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros((0,)),
            color_coeffs=np.zeros((0, sh_basis, 3)),
            features=np.zeros((0, feature_dim)),
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            scale_log=self.scale_logs[i],
            rotation=self.rotations[i],
            opacity_logit=self.opacity_logits[i],
            color_coeffs=self.color_coeffs[i],
            feature=self.features[i],
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def sh_basis(self) -> int:
        return self.color_coeffs.shape[1]

    def copy(self) -> "Scene":
        return Scene(self.means.copy(), self.scale_logs.copy(),
                     self.rotations.copy(), self.opacity_logits.copy(),
                     self.color_coeffs.copy(), self.features.copy())

    def permuted(self, order: np.ndarray) -> "Scene":
        return Scene(self.means[order], self.scale_logs[order],
                     self.rotations[order], self.opacity_logits[order],
                     self.color_coeffs[order], self.features[order])

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Named references (not copies) to the raw parameter arrays."""
        return {
            "means": self.means,
            "scale_logs": self.scale_logs,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "color_coeffs": self.color_coeffs,
            "features": self.features,
        }

    def checksum(self) -> bytes:
        """Digest of every raw parameter byte; equal iff parameters are bit-identical."""
        import hashlib

        h = hashlib.sha256()
        for arr in self.param_arrays().values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.digest()

    def normalize_rotations(self) -> None:
        """Renormalize quaternions in place (call after each optimizer step)."""
        self.rotations[:] = quat_normalize(self.rotations)


def activate_scene(scene: Scene, view_dirs: np.ndarray | None = None):
    """Vectorized activation of a whole scene.

    Returns (means (N,3), covs (N,3,3), opacities (N,), rgb (N,3), features (N,C)).
    """
    n = len(scene)
    if n == 0:
        return (np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0,)),
                np.zeros((0, 3)), np.zeros((0, scene.feature_dim)))
    R = quat_to_rotmat(scene.rotations)
    s = np.exp(scene.scale_logs)
    M = R * s[:, np.newaxis, :]
    covs = M @ np.swapaxes(M, 1, 2)
    opac = sigmoid(scene.opacity_logits)
    rgb = eval_sh_color(scene.color_coeffs, view_dirs)
    return scene.means, covs, opac, rgb, scene.features


@dataclass
class Camera:
    """Pinhole or orthographic camera with a rigid world-to-camera pose.

    The camera looks along its +Z axis; +X is image right, +Y is image down.
    ``fx, fy`` are pixels per unit at unit depth for perspective cameras and
    pixels per meter for orthogonal ones. Pixel (row i, col j) samples the
    continuous image point (u, v) = (j + 0.5, i + 0.5).
    """

    mode: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        if self.mode not in (PERSPECTIVE, ORTHOGONAL):
            raise ValueError(f"unknown camera mode {self.mode!r}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal scales must be positive")
        if self.mode == PERSPECTIVE and not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.R.shape != (3, 3):
            raise ValueError("pose rotation must be 3x3")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) \
                or not np.isclose(np.linalg.det(self.R), 1.0, atol=1e-9):
            raise ValueError("pose rotation must be orthonormal with determinant +1")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    Uses the +Z-forward / +Y-down image convention with ``up`` as the world up
    direction. ``eye - target`` must not be parallel to ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right = right / nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


@dataclass
class RenderOutput:
    """Per-pixel composited buffers produced by rendering a scene.

    color    (H, W, 3) in [0, 1]
    feature  (H, W, C)
    depth    (H, W) accumulated camera-space depth, meters (not alpha-normalized)
    alpha    (H, W) accumulated opacity = 1 - final transmittance, in [0, 1]
    """

    color: np.ndarray
    feature: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray

    @classmethod
    def zeros(cls, height: int, width: int, feature_dim: int) -> "RenderOutput":
        return cls(
            color=np.zeros((height, width, 3)),
            feature=np.zeros((height, width, feature_dim)),
            depth=np.zeros((height, width)),
            alpha=np.zeros((height, width)),
        )
