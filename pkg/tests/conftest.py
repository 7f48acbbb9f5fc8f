import numpy as np
import pytest

from splatbev.core import Camera, Gaussian, Scene, PERSPECTIVE, ORTHOGONAL


def random_scene(rng, n, feature_dim=6, sh_basis=1, depth_center=5.0, spread=0.8):
    """Small random scene in front of a +Z-looking camera at the origin."""
    gaussians = []
    for _ in range(n):
        gaussians.append(Gaussian(
            mean=rng.normal(0, spread, 3) + [0.0, 0.0, depth_center],
            scale_log=rng.normal(-1.2, 0.3, 3),
            rotation=rng.normal(0, 1, 4),
            opacity_logit=rng.normal(0.0, 0.8),
            color_coeffs=rng.normal(0, 0.3, (sh_basis, 3)),
            feature=rng.normal(0, 1, feature_dim),
        ))
    return Scene.from_gaussians(gaussians)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def persp_camera():
    return Camera(mode=PERSPECTIVE, fx=50, fy=55, cx=24, cy=20, width=48, height=40)


@pytest.fixture
def ortho_camera():
    return Camera(mode=ORTHOGONAL, fx=8, fy=9, cx=24, cy=20, width=48, height=40)
