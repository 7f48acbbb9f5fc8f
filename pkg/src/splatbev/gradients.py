"""Analytic backward pass through compositing, projection and activation.

``render_backward`` turns per-pixel gradients on the rendered buffers into
gradients on every raw Gaussian parameter. The chain covers alpha compositing,
the Gaussian falloff, the 2D projection (including the perspective Jacobian's
dependence on the mean), the rigid world-to-camera transform, and the
activation functions. ``finite_diff_check`` validates it against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
import numpy as np

from . import _kernels
from .core import (Camera, RenderOutput, Scene, SH_C0, SH_C1, PERSPECTIVE,
                   quat_normalize, quat_to_rotmat, sigmoid)
from .rasterizer import RenderConfig, _tile_shards, exact_config, prepare_render, render


@dataclass
class BufferGrads:
    """Upstream loss gradients on the rendered buffers.

    The alpha channel participates because losses that alpha-normalize depth
    differentiate through the accumulated-opacity buffer as well.
    """

    color: np.ndarray
    feature: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray

    @classmethod
    def zeros(cls, height: int, width: int, feature_dim: int) -> "BufferGrads":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width, feature_dim)),
                   np.zeros((height, width)), np.zeros((height, width)))

    def validate(self):
        for name in ("color", "feature", "depth", "alpha"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite upstream gradient in {name} buffer")


@dataclass
class GaussianGrads:
    """Gradients of a scalar loss w.r.t. every raw parameter of a scene."""

    means: np.ndarray
    scale_logs: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_coeffs: np.ndarray
    features: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> "GaussianGrads":
        return cls(np.zeros_like(scene.means), np.zeros_like(scene.scale_logs),
                   np.zeros_like(scene.rotations), np.zeros_like(scene.opacity_logits),
                   np.zeros_like(scene.color_coeffs), np.zeros_like(scene.features))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "scale_logs": self.scale_logs,
                "rotations": self.rotations, "opacity_logits": self.opacity_logits,
                "color_coeffs": self.color_coeffs, "features": self.features}

    def add_(self, other: "GaussianGrads") -> "GaussianGrads":
        for name, arr in self.arrays().items():
            arr += getattr(other, name)
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays().values())))

    def scale_(self, factor: float) -> "GaussianGrads":
        for arr in self.arrays().values():
            arr *= factor
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())


def _rotmat_grad_to_quat(dR: np.ndarray, qhat: np.ndarray) -> np.ndarray:
    """Contract (N,3,3) rotation-matrix gradients with dR/dq at unit quaternions."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    d = dR
    gw = 2.0 * (-d[:, 0, 1] * z + d[:, 0, 2] * y + d[:, 1, 0] * z
                - d[:, 1, 2] * x - d[:, 2, 0] * y + d[:, 2, 1] * x)
    gx = 2.0 * (d[:, 0, 1] * y + d[:, 0, 2] * z + d[:, 1, 0] * y
                - 2.0 * d[:, 1, 1] * x - d[:, 1, 2] * w + d[:, 2, 0] * z
                + d[:, 2, 1] * w - 2.0 * d[:, 2, 2] * x)
    gy = 2.0 * (-2.0 * d[:, 0, 0] * y + d[:, 0, 1] * x + d[:, 0, 2] * w
                + d[:, 1, 0] * x + d[:, 1, 2] * z - d[:, 2, 0] * w
                + d[:, 2, 1] * z - 2.0 * d[:, 2, 2] * y)
    gz = 2.0 * (-2.0 * d[:, 0, 0] * z - d[:, 0, 1] * w + d[:, 0, 2] * x
                + d[:, 1, 0] * w - 2.0 * d[:, 1, 1] * z + d[:, 1, 2] * y
                + d[:, 2, 0] * x + d[:, 2, 1] * y)
    return np.stack([gw, gx, gy, gz], axis=1)


def render_backward(scene: Scene, camera: Camera, upstream: BufferGrads,
                    config: RenderConfig = RenderConfig()) -> GaussianGrads:
    """Gradients of sum(upstream * buffers) w.r.t. raw scene parameters.

    Replays the forward compositing (same configuration, including early
    termination), so the result is the exact Jacobian-transpose product of the
    render that produced the buffers.
    """
    upstream.validate()
    grads = GaussianGrads.zeros_like(scene)
    if len(scene) == 0:
        return grads
    st = prepare_render(scene, camera, config)
    m = st.proj.mean2d.shape[0]
    if m == 0:
        return grads
    grid = st.grid
    n_feat = scene.feature_dim

    def make_buffers():
        return [np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m),
                np.zeros(m), np.zeros((m, 3)), np.zeros((m, n_feat)), np.zeros(m)]

    def run(lo, hi, buffers):
        _kernels.composite_tiles_backward(
            lo, hi, grid.starts, grid.gauss,
            st.proj.mean2d[:, 0], st.proj.mean2d[:, 1],
            st.inv_a, st.inv_b, st.inv_c, st.opac, st.rgb, st.feat,
            st.proj.depth, grid.bx0, grid.bx1, grid.by0, grid.by1,
            camera.height, camera.width, grid.n_tiles_x, grid.tile_size,
            config.effective_threshold,
            upstream.color, upstream.feature, upstream.depth, upstream.alpha,
            *buffers)

    shards = _tile_shards(grid.n_tiles_x * grid.n_tiles_y, config.workers)
    if len(shards) == 1:
        buffers = make_buffers()
        run(*shards[0], buffers)
    else:
        all_buffers = [make_buffers() for _ in shards]
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            list(pool.map(lambda sb: run(sb[0][0], sb[0][1], sb[1]),
                          zip(shards, all_buffers)))
        buffers = all_buffers[0]
        for extra in all_buffers[1:]:  # fixed shard order: deterministic sums
            for acc, part in zip(buffers, extra):
                acc += part
    (g_mu_u, g_mu_v, g_cov_a, g_cov_b, g_cov_c,
     g_opac, g_rgb, g_feat, g_depth) = buffers

    # 2D covariance gradient, full-matrix convention (symmetric by construction).
    Gm = np.empty((m, 2, 2))
    Gm[:, 0, 0] = g_cov_a
    Gm[:, 0, 1] = g_cov_b
    Gm[:, 1, 0] = g_cov_b
    Gm[:, 1, 1] = g_cov_c

    mc = st.proj.mean_cam
    fx, fy = camera.fx, camera.fy
    d_mean_cam = np.zeros((m, 3))
    d_mean_cam[:, 2] += g_depth
    if camera.mode == PERSPECTIVE:
        X, Y, Z = mc[:, 0], mc[:, 1], mc[:, 2]
        iz = 1.0 / Z
        iz2 = iz * iz
        d_mean_cam[:, 0] += g_mu_u * fx * iz
        d_mean_cam[:, 1] += g_mu_v * fy * iz
        d_mean_cam[:, 2] += -(g_mu_u * fx * X + g_mu_v * fy * Y) * iz2
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = fx * iz
        J[:, 0, 2] = -fx * X * iz2
        J[:, 1, 1] = fy * iz
        J[:, 1, 2] = -fy * Y * iz2
        # cov2d = J S J^T also moves with the mean through J.
        sel = st.proj.scene_index
        _, covs_all = _activated_covs(scene)
        cov_cam = np.einsum("ij,njk,lk->nil", camera.R, covs_all[sel], camera.R)
        dJ = 2.0 * np.einsum("nij,njk,nkl->nil", Gm, J, cov_cam)
        d_mean_cam[:, 0] += dJ[:, 0, 2] * (-fx * iz2)
        d_mean_cam[:, 1] += dJ[:, 1, 2] * (-fy * iz2)
        d_mean_cam[:, 2] += (dJ[:, 0, 0] * (-fx * iz2) + dJ[:, 0, 2] * (2 * fx * X * iz2 * iz)
                             + dJ[:, 1, 1] * (-fy * iz2) + dJ[:, 1, 2] * (2 * fy * Y * iz2 * iz))
    else:
        d_mean_cam[:, 0] += g_mu_u * fx
        d_mean_cam[:, 1] += g_mu_v * fy
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = fx
        J[:, 1, 1] = fy
    d_cov_cam = np.einsum("nji,njk,nkl->nil", J, Gm, J)

    # Rigid frame: mean_cam = R mean + t, cov_cam = R cov R^T.
    d_mean_w = d_mean_cam @ camera.R
    d_cov_w = np.einsum("ji,njk,kl->nil", camera.R, d_cov_cam, camera.R)

    sel = st.proj.scene_index
    qhat = quat_normalize(scene.rotations[sel])
    Rq = quat_to_rotmat(qhat)
    s = np.exp(scene.scale_logs[sel])
    M = Rq * s[:, None, :]
    dM = 2.0 * np.einsum("nij,njk->nik", d_cov_w, M)
    d_scale = np.einsum("nik,nik->nk", dM, Rq) * s
    dRq = dM * s[:, None, :]
    d_qhat = _rotmat_grad_to_quat(dRq, qhat)
    # Through the normalization q_hat = q / ||q||.
    qraw = scene.rotations[sel]
    qnorm = np.linalg.norm(qraw, axis=1, keepdims=True)
    d_rot = (d_qhat - qhat * np.sum(qhat * d_qhat, axis=1, keepdims=True)) / qnorm

    op = sigmoid(scene.opacity_logits[sel])
    d_op = g_opac * op * (1.0 - op)

    # Color: gradient passes through the [0, 1] clamp only where it is inactive.
    coeffs = scene.color_coeffs[sel]
    dirs = None if st.view_dirs is None else st.view_dirs[sel]
    pre = 0.5 + SH_C0 * coeffs[:, 0, :]
    if coeffs.shape[1] == 4 and dirs is not None:
        dx, dy, dz = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        pre = pre - SH_C1 * dy * coeffs[:, 1, :] + SH_C1 * dz * coeffs[:, 2, :] \
            - SH_C1 * dx * coeffs[:, 3, :]
    gm_rgb = g_rgb * ((pre > 0.0) & (pre < 1.0))
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[:, 0, :] = SH_C0 * gm_rgb
    if coeffs.shape[1] == 4 and dirs is not None:
        d_coeffs[:, 1, :] = -SH_C1 * dirs[:, 1:2] * gm_rgb
        d_coeffs[:, 2, :] = SH_C1 * dirs[:, 2:3] * gm_rgb
        d_coeffs[:, 3, :] = -SH_C1 * dirs[:, 0:1] * gm_rgb
        if camera.mode == PERSPECTIVE:
            # View direction moves with the mean: dir = (mean - eye)/r.
            d_dir = np.stack([
                -SH_C1 * np.sum(coeffs[:, 3, :] * gm_rgb, axis=1),
                -SH_C1 * np.sum(coeffs[:, 1, :] * gm_rgb, axis=1),
                SH_C1 * np.sum(coeffs[:, 2, :] * gm_rgb, axis=1),
            ], axis=1)
            delta = scene.means[sel] - camera.position
            r = np.linalg.norm(delta, axis=1, keepdims=True)
            d_mean_w += (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / r

    # scene_index entries are unique (each visible Gaussian projects once).
    grads.means[sel] = d_mean_w
    grads.scale_logs[sel] = d_scale
    grads.rotations[sel] = d_rot
    grads.opacity_logits[sel] = d_op
    grads.color_coeffs[sel] = d_coeffs
    grads.features[sel] = g_feat
    return grads


def _activated_covs(scene: Scene):
    R = quat_to_rotmat(scene.rotations)
    s = np.exp(scene.scale_logs)
    M = R * s[:, None, :]
    return M, M @ np.swapaxes(M, 1, 2)


PARAM_KINDS = ("means", "scale_logs", "rotations", "opacity_logits",
               "color_coeffs", "features")


@dataclass
class FDReport:
    """Result of a finite-difference gradient audit."""

    max_rel_error: float
    per_kind: dict[str, float]
    cutoff_probe_error: float | None = None
    samples: list = field(default_factory=list)


def finite_diff_check(scene: Scene, camera: Camera, loss_fn, eps: float = 1e-5,
                      rng: np.random.Generator | None = None,
                      min_params: int = 20,
                      config: RenderConfig | None = None,
                      cutoff_probe: bool = True) -> FDReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(output) -> (value, BufferGrads)`` must be a deterministic scalar
    of the RenderOutput together with its per-buffer gradients. At least
    ``min_params`` raw parameters are probed, spanning every parameter kind.
    Relative errors use an absolute floor of 1e-8. A Gaussian deliberately
    straddling the falloff cutoff is probed separately (the cutoff is a known
    non-differentiability) and never contributes to ``max_rel_error``.
    """
    rng = rng or np.random.default_rng(0)
    config = exact_config(config)

    out = render(scene, camera, config)
    _, upstream = loss_fn(out)
    analytic = render_backward(scene, camera, upstream, config)

    n = len(scene)
    per_sample = max(1, -(-min_params // len(PARAM_KINDS)))
    samples = []
    for kind in PARAM_KINDS:
        arr = scene.param_arrays()[kind]
        comp_shape = arr.shape[1:]
        n_comp = int(np.prod(comp_shape)) if comp_shape else 1
        for _ in range(per_sample):
            g = int(rng.integers(n))
            c = int(rng.integers(n_comp))
            samples.append((kind, g, c))

    def fd_for(target_scene, kind, g, c, step):
        arr = target_scene.param_arrays()[kind]
        flat = arr.reshape(len(target_scene), -1)
        orig = flat[g, c]
        flat[g, c] = orig + step
        hi = loss_fn(render(target_scene, camera, config))[0]
        flat[g, c] = orig - step
        lo = loss_fn(render(target_scene, camera, config))[0]
        flat[g, c] = orig
        return (hi - lo) / (2.0 * step)

    per_kind: dict[str, float] = {k: 0.0 for k in PARAM_KINDS}
    recorded = []
    work = scene.copy()
    for kind, g, c in samples:
        an = analytic.arrays()[kind].reshape(n, -1)[g, c]
        err = np.inf
        fd = np.nan
        # A step interval that happens to straddle the falloff cutoff (or the
        # alpha clamp) sees a jump; shrinking the step escapes it, while a
        # genuinely wrong gradient stays wrong at every step size.
        for step in (eps, eps / 8.0, eps / 64.0):
            fd = fd_for(work, kind, g, c, step)
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            if err < 1e-5:
                break
        per_kind[kind] = max(per_kind[kind], err)
        recorded.append((kind, g, c, fd, an, err))

    cutoff_err = None
    if cutoff_probe:
        cutoff_err = _cutoff_probe_error(scene, camera, loss_fn, eps, config)

    return FDReport(max_rel_error=max(per_kind.values()), per_kind=per_kind,
                    cutoff_probe_error=cutoff_err, samples=recorded)


def _cutoff_probe_error(scene: Scene, camera: Camera, loss_fn, eps, config):
    """FD-vs-analytic error for a Gaussian whose cutoff ring crosses pixel centers."""
    from .core import Gaussian

    depth = 5.0
    # Footprint sigma of 2 px puts the cutoff ring at radius 6 px, passing
    # exactly through pixel centers 6 px from the mean.
    sigma_px2 = 4.0 - 0.3
    if camera.mode == PERSPECTIVE:
        u = camera.width // 2 + 0.5
        v = camera.height // 2 + 0.5
        mean_cam = np.array([(u - camera.cx) / camera.fx * depth,
                             (v - camera.cy) / camera.fy * depth, depth])
        sigma_w = np.sqrt(sigma_px2) / camera.fx * depth
    else:
        u = camera.width // 2 + 0.5
        v = camera.height // 2 + 0.5
        mean_cam = np.array([(u - camera.cx) / camera.fx,
                             (v - camera.cy) / camera.fy, depth])
        sigma_w = np.sqrt(sigma_px2) / camera.fx
    mean_w = camera.R.T @ (mean_cam - camera.t)
    probe = Gaussian(mean=mean_w, scale_log=np.log(sigma_w) * np.ones(3),
                     rotation=np.array([1.0, 0, 0, 0]), opacity_logit=1.0,
                     color_coeffs=np.full((scene.sh_basis, 3), 0.2),
                     feature=np.zeros(scene.feature_dim))
    probed = Scene.from_gaussians([scene[i] for i in range(len(scene))] + [probe])

    out = render(probed, camera, config)
    _, upstream = loss_fn(out)
    analytic = render_backward(probed, camera, upstream, config)
    g = len(probed) - 1
    worst = 0.0
    flat = probed.means.reshape(len(probed), -1)
    for c in range(3):
        orig = flat[g, c]
        flat[g, c] = orig + eps
        hi = loss_fn(render(probed, camera, config))[0]
        flat[g, c] = orig - eps
        lo = loss_fn(render(probed, camera, config))[0]
        flat[g, c] = orig
        fd = (hi - lo) / (2.0 * eps)
        an = analytic.means[g, c]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst
