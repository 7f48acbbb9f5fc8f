"""Procedural desk-scale driving scenes with independent ground truth.

A scene is a ground plane, lane strips, box vehicles, cylinder pedestrians and
(optionally) overhead canopy clutter, emitted both as Gaussians and as exact
geometric primitives. Reference images come from the naive splatting oracle;
depth and feature teachers come from closed-form ray-primitive intersections;
BEV targets come from scan-line polygon rasterization. Keeping the teachers
off the renderer under test is what makes them usable as oracles.

World frame: x/y ground plane, z up, ego at the origin. The BEV image maps
world x to rows and world y to columns at ``px_per_m`` pixels per meter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from .core import Camera, Scene, SH_C0, PERSPECTIVE, look_at_pose
from .rasterizer import render_naive_oracle

log = logging.getLogger(__name__)

CLASS_NAMES = ("vehicle", "pedestrian", "lane")
VEHICLE, PEDESTRIAN, LANE = 0, 1, 2
_GROUND_EMB, _CLUTTER_EMB = 3, 4  # extra embedding rows beyond the K classes

CENTERNESS_SIGMA_PX = 3.0


class PackingError(RuntimeError):
    """Raised when objects cannot be placed without BEV-footprint overlap."""


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the procedural generator. Deterministic under ``seed``."""

    seed: int = 7
    n_vehicles: int = 6
    n_pedestrians: int = 5
    n_lanes: int = 3
    extent: float = 100.0            # full world width, meters (matches BEV range)
    placement_radius: float = 26.0   # objects land within this radius of ego
    clutter: bool = False
    n_clutter: int = 10
    clutter_z: tuple[float, float] = (4.2, 5.8)
    feature_dim: int = 16
    embedding_seed: int = 2024   # shared across scenes: the teacher is frozen
    n_cameras: int = 6
    image_height: int = 128
    image_width: int = 224
    cam_focal: float = 160.0
    cam_height: float = 1.6
    cam_pitch_deg: float = 12.0      # downward pitch of every rig camera
    ground_halfwidth: float = 36.0
    ground_spacing: float = 1.5
    bev_px_per_m: float = 2.0
    bev_resolution: int = 200


@dataclass
class Instance:
    """One placed object: class id, BEV footprint polygon and its center."""

    class_id: int
    polygon: np.ndarray   # (P, 2) world-frame footprint vertices
    center: np.ndarray    # (2,) world-frame footprint center
    height: float = 0.0
    # Vehicles keep (length, width, yaw); pedestrians keep radius.
    params: dict = field(default_factory=dict)


@dataclass
class MaskSet:
    """Analytic BEV targets: per-class masks, centerness, pixel-to-center offsets.

    Offsets are (du, dv) in BEV pixels from each pixel center to its instance
    center, defined only inside ``instance_mask`` (vehicle/pedestrian pixels).
    """

    class_masks: np.ndarray    # (K, Hb, Wb) in {0, 1}
    centerness: np.ndarray     # (Hb, Wb) in [0, 1]
    offsets: np.ndarray        # (Hb, Wb, 2)
    instance_mask: np.ndarray  # (Hb, Wb) bool
    flags: tuple[str, ...] = ()


@dataclass
class GroundTruthBundle:
    """Multi-view references and BEV targets for one generated scene."""

    cameras: list[Camera]
    images: np.ndarray | None       # (k, H, W, 3)
    depths: np.ndarray | None       # (k, H, W) meters
    depth_valid: np.ndarray | None  # (k, H, W) bool
    features: np.ndarray | None     # (k, H, W, C), unit-norm where valid
    bev: MaskSet
    instances: list[Instance]
    embeddings: np.ndarray          # (5, C): vehicle, pedestrian, lane, ground, clutter


def class_embeddings(feature_dim: int, seed: int = 2024) -> np.ndarray:
    """Five orthonormal unit vectors (pairwise cosine 0 <= 0.2 bound).

    Derived from a dedicated seed, not the scene seed: the table stands in
    for a frozen teacher encoder, so every scene must share it or features
    learned on one scene would be meaningless on another.
    """
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(feature_dim, feature_dim))
    q, _ = np.linalg.qr(mat)
    return q[:, :5].T.copy()


# --------------------------------------------------------------------------
# Placement


def _rect_polygon(cx, cy, length, width, yaw) -> np.ndarray:
    dx, dy = 0.5 * length, 0.5 * width
    corners = np.array([[-dx, -dy], [dx, -dy], [dx, dy], [-dx, dy]])
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.array([cx, cy])


def _circle_polygon(cx, cy, radius, segments=20) -> np.ndarray:
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    return np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)


def _place_instances(spec: SceneSpec, rng: np.random.Generator) -> list[Instance]:
    instances: list[Instance] = []
    placed: list[ShapelyPolygon] = []

    def try_place(make, count, label):
        for _ in range(count):
            for _attempt in range(200):
                inst = make()
                poly = ShapelyPolygon(inst.polygon)
                if all(not poly.intersects(p) for p in placed):
                    placed.append(poly)
                    instances.append(inst)
                    break
            else:
                raise PackingError(
                    f"could not place {label} without overlap after 200 attempts")

    def make_vehicle():
        r = rng.uniform(7.0, spec.placement_radius)
        ang = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(ang), r * np.sin(ang)
        length = rng.uniform(4.8, 6.0)
        width = rng.uniform(2.3, 2.8)
        yaw = rng.uniform(0, np.pi)
        return Instance(VEHICLE, _rect_polygon(cx, cy, length, width, yaw),
                        np.array([cx, cy]), height=rng.uniform(1.4, 1.7),
                        params={"length": length, "width": width, "yaw": yaw})

    def make_pedestrian():
        r = rng.uniform(6.0, spec.placement_radius * 0.85)
        ang = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(ang), r * np.sin(ang)
        radius = rng.uniform(0.9, 1.2)
        return Instance(PEDESTRIAN, _circle_polygon(cx, cy, radius),
                        np.array([cx, cy]), height=1.7, params={"radius": radius})

    try_place(make_vehicle, spec.n_vehicles, "vehicle")
    try_place(make_pedestrian, spec.n_pedestrians, "pedestrian")
    return instances


def _lane_instances(spec: SceneSpec, rng: np.random.Generator) -> list[Instance]:
    """Long lane strips, alternating orientation, clear of the ego origin."""
    lanes = []
    half = spec.ground_halfwidth * 0.95
    for i in range(spec.n_lanes):
        width = rng.uniform(4.5, 6.0)
        offset = rng.uniform(5.0, 18.0) * (1 if i % 2 == 0 else -1)
        if i % 2 == 0:  # strip along world x
            poly = np.array([[-half, offset - width / 2], [half, offset - width / 2],
                             [half, offset + width / 2], [-half, offset + width / 2]])
            center = np.array([0.0, offset])
        else:           # strip along world y
            poly = np.array([[offset - width / 2, -half], [offset + width / 2, -half],
                             [offset + width / 2, half], [offset - width / 2, half]])
            center = np.array([offset, 0.0])
        lanes.append(Instance(LANE, poly, center, height=0.02, params={"width": width}))
    return lanes


def _clutter_blobs(spec: SceneSpec, rng: np.random.Generator) -> list[dict]:
    blobs = []
    for _ in range(spec.n_clutter):
        r = rng.uniform(4.0, spec.placement_radius)
        ang = rng.uniform(0, 2 * np.pi)
        blobs.append({
            "center": np.array([r * np.cos(ang), r * np.sin(ang),
                                rng.uniform(*spec.clutter_z)]),
            "radius": rng.uniform(2.5, 4.0),
        })
    return blobs


# --------------------------------------------------------------------------
# Gaussian emission

# Surface sampling constants, tuned so the splat-rendered class boundary
# tracks the analytic footprint to a fraction of a BEV pixel.
_GROUND_SIGMA_FRAC = 0.42
_LANE_SPACING = 0.8
_LANE_SIGMA = 0.3
_LANE_INSET = 0.55
_VEHICLE_SPACING = 0.3
_VEHICLE_SIGMA = 0.12
_VEHICLE_INSET = 0.62
_PED_COLUMN = 6       # splats stacked per pedestrian
_PED_REACH = 2.105    # footprint radius in units of effective sigma
_BEV_FLOOR_M2 = 0.075  # the 0.3 px^2 covariance floor in m^2 at 2 px/m
_OPAQUE_LOGIT = 2.6  # sigmoid(2.6) ~ 0.93


def _grid(lo_x, hi_x, lo_y, hi_y, spacing):
    nx = max(1, int(np.floor((hi_x - lo_x) / spacing)) + 1)
    ny = max(1, int(np.floor((hi_y - lo_y) / spacing)) + 1)
    xs = np.linspace(lo_x, hi_x, nx)
    ys = np.linspace(lo_y, hi_y, ny)
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


class _GaussianSink:
    def __init__(self, feature_dim):
        self.means, self.scales, self.colors, self.features = [], [], [], []
        self.opacity = []
        self.feature_dim = feature_dim

    def add(self, means3, sigma3, rgb, feature_vec, opacity_logit=_OPAQUE_LOGIT):
        n = means3.shape[0]
        if n == 0:
            return
        self.means.append(means3)
        self.scales.append(np.broadcast_to(np.log(sigma3), (n, 3)).copy())
        rgb = np.clip(np.broadcast_to(rgb, (n, 3)), 0.02, 0.98)
        self.colors.append((rgb - 0.5) / SH_C0)
        self.features.append(np.broadcast_to(feature_vec, (n, self.feature_dim)).copy())
        self.opacity.append(np.full(n, opacity_logit))

    def scene(self) -> Scene:
        means = np.concatenate(self.means)
        n = means.shape[0]
        # Snap to float32 so saved scenes round-trip bit-exactly.
        f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32).astype(np.float64)
        return Scene(
            means=f32(means),
            scale_logs=f32(np.concatenate(self.scales)),
            rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
            opacity_logits=f32(np.concatenate(self.opacity)),
            color_coeffs=f32(np.concatenate(self.colors))[:, None, :],
            features=f32(np.concatenate(self.features)),
        )


def _emit_gaussians(spec, rng, instances, lanes, blobs, emb) -> Scene:
    sink = _GaussianSink(spec.feature_dim)

    # Ground plane: jittered grid of flat discs.
    gh, sp = spec.ground_halfwidth, spec.ground_spacing
    gx, gy = _grid(-gh, gh, -gh, gh, sp)
    gx = gx + rng.uniform(-0.25 * sp, 0.25 * sp, gx.shape)
    gy = gy + rng.uniform(-0.25 * sp, 0.25 * sp, gy.shape)
    pts = np.stack([gx, gy, np.zeros_like(gx)], axis=1)
    shade = rng.uniform(-0.05, 0.05, (gx.size, 1))
    sink.add(pts, (sp * _GROUND_SIGMA_FRAC, sp * _GROUND_SIGMA_FRAC, 0.02),
             np.array([0.35, 0.4, 0.33]) + shade, emb[_GROUND_EMB], 2.2)

    # Lane strips: bright flat discs slightly above the ground plane.
    for lane in lanes:
        poly = lane.polygon
        lx, hx = poly[:, 0].min() + _LANE_INSET, poly[:, 0].max() - _LANE_INSET
        ly, hy = poly[:, 1].min() + _LANE_INSET, poly[:, 1].max() - _LANE_INSET
        px, py = _grid(lx, hx, ly, hy, _LANE_SPACING)
        keep = _points_in_polygon(np.stack([px, py], axis=1),
                                  poly - 0.0)  # axis-aligned anyway
        px, py = px[keep], py[keep]
        pts = np.stack([px, py, np.full_like(px, 0.02)], axis=1)
        sink.add(pts, (_LANE_SIGMA, _LANE_SIGMA, 0.01),
                 np.array([0.78, 0.78, 0.8]), emb[LANE])

    palette = np.array([[0.75, 0.2, 0.2], [0.2, 0.3, 0.75], [0.7, 0.6, 0.2],
                        [0.25, 0.6, 0.6], [0.55, 0.25, 0.6], [0.8, 0.45, 0.2]])
    vi = 0
    for inst in instances:
        if inst.class_id == VEHICLE:
            length, width, yaw = (inst.params["length"], inst.params["width"],
                                  inst.params["yaw"])
            h = inst.height
            rgb = palette[vi % len(palette)]
            vi += 1
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, -s], [s, c]])

            def to_world(local_xy, z):
                world = local_xy @ rot.T + inst.center
                return np.concatenate([world, np.full((world.shape[0], 1), z)], axis=1)

            dx = max(0.5 * length - _VEHICLE_INSET, 0.1)
            dy = max(0.5 * width - _VEHICLE_INSET, 0.1)
            tx, ty = _grid(-dx, dx, -dy, dy, _VEHICLE_SPACING)
            sink.add(to_world(np.stack([tx, ty], axis=1), h), _VEHICLE_SIGMA,
                     rgb, emb[VEHICLE])
            for zf in (0.35, 0.75):
                ex = np.arange(-dx, dx + 1e-9, _VEHICLE_SPACING)
                ey = np.arange(-dy, dy + 1e-9, _VEHICLE_SPACING)
                side = np.concatenate([
                    np.stack([ex, np.full_like(ex, -dy)], axis=1),
                    np.stack([ex, np.full_like(ex, dy)], axis=1),
                    np.stack([np.full_like(ey, -dx), ey], axis=1),
                    np.stack([np.full_like(ey, dx), ey], axis=1),
                ])
                sink.add(to_world(side, zf * h), _VEHICLE_SIGMA, rgb * 0.85,
                         emb[VEHICLE])
        elif inst.class_id == PEDESTRIAN:
            radius = inst.params["radius"]
            rgb = np.array([0.85, 0.55, 0.3])
            # Vertical column with a radial falloff calibrated so the
            # dominant-class boundary in BEV lands on the footprint circle.
            zs = np.linspace(0.2, 1.6, _PED_COLUMN)
            column = np.stack([np.full(_PED_COLUMN, inst.center[0]),
                               np.full(_PED_COLUMN, inst.center[1]), zs], axis=1)
            sigma_eff = radius / _PED_REACH
            sigma_xy = np.sqrt(max(sigma_eff**2 - _BEV_FLOOR_M2, 4e-4))
            sink.add(column, (sigma_xy, sigma_xy, 0.25), rgb, emb[PEDESTRIAN])

    for blob in blobs:
        n = 26
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = blob["center"] + d * blob["radius"] * rng.uniform(0.5, 1.0, (n, 1))
        shade = rng.uniform(-0.08, 0.08, (n, 1))
        sink.add(pts, 0.5, np.array([0.15, 0.42, 0.18]) + shade,
                 emb[_CLUTTER_EMB], 1.8)

    return sink.scene()


# --------------------------------------------------------------------------
# Analytic teachers (ray tracing, independent of the splatting renderer)


def _points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over points; boundary-inclusive-ish."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(points.shape[0], dtype=bool)
    px, py = polygon[:, 0], polygon[:, 1]
    n = polygon.shape[0]
    for i in range(n):
        x1, y1 = px[i], py[i]
        x2, y2 = px[(i + 1) % n], py[(i + 1) % n]
        crosses = (y1 <= y) != (y2 <= y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < np.where(crosses, xi, np.inf))
    return inside


def rig_cameras(spec: SceneSpec) -> list[Camera]:
    """Surround rig: yaw-distributed perspective cameras pitched toward the ground."""
    cams = []
    pitch = np.deg2rad(spec.cam_pitch_deg)
    for i in range(spec.n_cameras):
        yaw = 2 * np.pi * i / spec.n_cameras
        eye = np.array([0.8 * np.cos(yaw), 0.8 * np.sin(yaw), spec.cam_height])
        look = eye + np.array([np.cos(yaw) * np.cos(pitch),
                               np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
        R, t = look_at_pose(eye, look)
        # near=2: culls ground splats directly beneath the rig, whose EWA
        # footprints would otherwise blanket the image; no surface the rays
        # can reach sits closer than ~3 m.
        cams.append(Camera(mode=PERSPECTIVE, fx=spec.cam_focal, fy=spec.cam_focal,
                           cx=spec.image_width / 2, cy=spec.image_height / 2,
                           width=spec.image_width, height=spec.image_height,
                           R=R, t=t, near=2.0, far=500.0))
    return cams


def _ray_trace_view(camera: Camera, instances, lanes, blobs, ground_halfwidth=None):
    """Closed-form frontmost intersection for every pixel of one camera.

    Returns (depth, valid, class_code) with class_code in {-1 sky, VEHICLE,
    PEDESTRIAN, LANE, ground, clutter}. Depth is camera-space z of the hit.
    """
    H, W = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    dir_cam = np.stack([(jj - camera.cx) / camera.fx,
                        (ii - camera.cy) / camera.fy,
                        np.ones_like(jj)], axis=-1)
    d = dir_cam.reshape(-1, 3) @ camera.R  # world direction per unit camera z
    eye = camera.position
    n_px = d.shape[0]
    best = np.full(n_px, np.inf)
    cls = np.full(n_px, -1, dtype=np.int64)

    def consider(s, hit_mask, code):
        upd = hit_mask & (s > camera.near) & (s < best)
        best[upd] = s[upd]
        cls[upd] = code

    # Ground plane (lane decals classified afterwards from the hit point).
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = -eye[2] / d[:, 2]
    consider(s_ground, np.isfinite(s_ground) & (d[:, 2] < 0), _GROUND_EMB)

    for inst in instances:
        if inst.class_id == VEHICLE:
            yaw = inst.params["yaw"]
            c, s_ = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, s_], [-s_, c]])  # world->box
            o_xy = rot @ (eye[:2] - inst.center)
            d_xy = d[:, :2] @ rot.T
            half = np.array([inst.params["length"] / 2, inst.params["width"] / 2])
            t0 = np.full(n_px, -np.inf)
            t1 = np.full(n_px, np.inf)
            ok = np.ones(n_px, dtype=bool)
            for ax in range(2):
                da = d_xy[:, ax]
                oa = o_xy[ax]
                with np.errstate(divide="ignore", invalid="ignore"):
                    ta = (-half[ax] - oa) / da
                    tb = (half[ax] - oa) / da
                lo, hi = np.minimum(ta, tb), np.maximum(ta, tb)
                par = np.abs(da) < 1e-12
                miss = par & (np.abs(oa) > half[ax])
                ok &= ~miss
                t0 = np.where(par, t0, np.maximum(t0, lo))
                t1 = np.where(par, t1, np.minimum(t1, hi))
            dz = d[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (0.0 - eye[2]) / dz
                tb = (inst.height - eye[2]) / dz
            lo, hi = np.minimum(ta, tb), np.maximum(ta, tb)
            par = np.abs(dz) < 1e-12
            miss = par & ((eye[2] < 0) | (eye[2] > inst.height))
            ok &= ~miss
            t0 = np.where(par, t0, np.maximum(t0, lo))
            t1 = np.where(par, t1, np.minimum(t1, hi))
            enter = np.where(t0 > camera.near, t0, t1)  # inside box: exit point
            consider(enter, ok & (t0 <= t1), VEHICLE)
        elif inst.class_id == PEDESTRIAN:
            radius = inst.params["radius"]
            o_xy = eye[:2] - inst.center
            a = np.sum(d[:, :2] ** 2, axis=1)
            b = 2.0 * (d[:, :2] @ o_xy)
            c0 = o_xy @ o_xy - radius**2
            disc = b * b - 4 * a * c0
            hit = (disc >= 0) & (a > 1e-12)
            sq = np.sqrt(np.maximum(disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t_near = (-b - sq) / (2 * a)
            z_hit = eye[2] + t_near * d[:, 2]
            consider(t_near, hit & (z_hit >= 0) & (z_hit <= inst.height), PEDESTRIAN)
            # Top cap.
            with np.errstate(divide="ignore", invalid="ignore"):
                t_cap = (inst.height - eye[2]) / d[:, 2]
            cap_xy = eye[:2] + t_cap[:, None] * d[:, :2]
            in_cap = np.sum((cap_xy - inst.center) ** 2, axis=1) <= radius**2
            consider(t_cap, np.isfinite(t_cap) & in_cap, PEDESTRIAN)

    for blob in blobs:
        o = eye - blob["center"]
        a = np.sum(d * d, axis=1)
        b = 2.0 * (d @ o)
        c0 = o @ o - blob["radius"] ** 2
        disc = b * b - 4 * a * c0
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_near = (-b - sq) / (2 * a)
        consider(t_near, hit, _CLUTTER_EMB)

    # Lane decals: ground hits inside a lane polygon become lane pixels.
    ground_hit = cls == _GROUND_EMB
    if np.any(ground_hit) and lanes:
        pts = eye[:2] + best[ground_hit, None] * d[ground_hit, :2]
        lane_mask = np.zeros(pts.shape[0], dtype=bool)
        for lane in lanes:
            lane_mask |= _points_in_polygon(pts, lane.polygon)
        idx = np.nonzero(ground_hit)[0][lane_mask]
        cls[idx] = LANE

    # Ground hits beyond the modeled ground extent have no geometry to
    # supervise against; mark them invalid.
    if ground_halfwidth is not None:
        hit_xy = eye[:2] + best[:, None] * d[:, :2]
        beyond = ((np.abs(hit_xy[:, 0]) > ground_halfwidth - 1.0)
                  | (np.abs(hit_xy[:, 1]) > ground_halfwidth - 1.0))
        ground_like = (cls == _GROUND_EMB) | (cls == LANE)
        cls[ground_like & beyond] = -1
    valid = cls >= 0
    depth = np.where(valid, best, 0.0)
    return depth.reshape(H, W), valid.reshape(H, W), cls.reshape(H, W)


# --------------------------------------------------------------------------
# BEV ground truth


@dataclass(frozen=True)
class BevGrid:
    """Mapping between world x/y and BEV pixel indices."""

    resolution: int = 200
    px_per_m: float = 2.0

    @property
    def center_px(self) -> float:
        return self.resolution / 2.0

    def world_to_px(self, xy: np.ndarray):
        """(x, y) world -> (u, v) continuous BEV pixel coordinates."""
        u = self.px_per_m * xy[..., 1] + self.center_px
        v = self.px_per_m * xy[..., 0] + self.center_px
        return u, v

    def pixel_centers_world(self):
        """World (x, y) of every BEV pixel center, shape (res, res, 2)."""
        idx = np.arange(self.resolution) + 0.5
        v, u = np.meshgrid(idx, idx, indexing="ij")
        x = (v - self.center_px) / self.px_per_m
        y = (u - self.center_px) / self.px_per_m
        return np.stack([x, y], axis=-1)


def gt_bev_rasterize(instances: list[Instance], grid: BevGrid) -> MaskSet:
    """Scan-line rasterization of instance footprints at BEV pixel centers.

    Vehicles and pedestrians occlude lanes where footprints overlap; only they
    define centerness bumps and pixel-to-center offsets. Zero-area polygons
    are skipped and flagged.
    """
    res = grid.resolution
    world = grid.pixel_centers_world().reshape(-1, 2)
    class_masks = np.zeros((len(CLASS_NAMES), res, res))
    centerness = np.zeros(res * res)
    offsets = np.zeros((res * res, 2))
    instance_mask = np.zeros(res * res, dtype=bool)
    flags = []

    order = sorted(instances, key=lambda inst: inst.class_id == LANE)
    occupied = np.zeros(res * res, dtype=bool)
    uu = np.tile(np.arange(res) + 0.5, res)          # u = column coordinate
    vv = np.repeat(np.arange(res) + 0.5, res)        # v = row coordinate
    for inst in order:
        area = ShapelyPolygon(inst.polygon).area
        if area <= 0.0:
            flags.append(f"degenerate zero-area polygon for class {inst.class_id} skipped")
            continue
        inside = _points_in_polygon(world, inst.polygon)
        if inst.class_id == LANE:
            inside &= ~occupied
            class_masks[LANE].ravel()[inside] = 1.0
            continue
        class_masks[inst.class_id].ravel()[inside] = 1.0
        occupied |= inside
        instance_mask |= inside
        cu, cv = grid.world_to_px(inst.center)
        d2 = (uu - cu) ** 2 + (vv - cv) ** 2
        np.maximum(centerness, np.exp(-d2 / (2.0 * CENTERNESS_SIGMA_PX**2)),
                   out=centerness)
        offsets[inside, 0] = cu - uu[inside]
        offsets[inside, 1] = cv - vv[inside]

    return MaskSet(class_masks=class_masks,
                   centerness=centerness.reshape(res, res),
                   offsets=offsets.reshape(res, res, 2),
                   instance_mask=instance_mask.reshape(res, res),
                   flags=tuple(flags))


# --------------------------------------------------------------------------
# Entry point


def generate_scene(spec: SceneSpec, views: bool = True) -> tuple[Scene, GroundTruthBundle]:
    """Build one synthetic scene plus its full ground-truth bundle.

    Deterministic under ``spec.seed``. With ``views=False`` the perspective
    references (images, depth and feature teachers) are skipped, which is much
    faster when only BEV targets are needed.
    """
    rng = np.random.default_rng(spec.seed)
    emb = class_embeddings(spec.feature_dim, spec.embedding_seed)
    instances = _place_instances(spec, rng)
    lanes = _lane_instances(spec, rng)
    blobs = _clutter_blobs(spec, rng) if spec.clutter else []
    scene = _emit_gaussians(spec, rng, instances, lanes, blobs, emb)

    grid = BevGrid(resolution=spec.bev_resolution, px_per_m=spec.bev_px_per_m)
    bev = gt_bev_rasterize(instances + lanes, grid)

    cameras = rig_cameras(spec)
    images = depths = valid = features = None
    if views:
        k = len(cameras)
        H, W, C = spec.image_height, spec.image_width, spec.feature_dim
        images = np.zeros((k, H, W, 3))
        depths = np.zeros((k, H, W))
        valid = np.zeros((k, H, W), dtype=bool)
        features = np.zeros((k, H, W, C))
        for i, cam in enumerate(cameras):
            out = render_naive_oracle(scene, cam)
            images[i] = out.color
            depth, ok, cls = _ray_trace_view(cam, instances, lanes, blobs,
                                             spec.ground_halfwidth)
            depths[i] = depth
            valid[i] = ok
            features[i][ok] = emb[cls[ok]]

    bundle = GroundTruthBundle(cameras=cameras, images=images, depths=depths,
                               depth_valid=valid, features=features, bev=bev,
                               instances=instances + lanes, embeddings=emb)
    return scene, bundle


def degrade_scene(scene, seed: int, mean_noise: float = 0.15,
                  feature_noise: float = 0.35, opacity_noise: float = 0.5):
    """Deterministically perturb a ground-truth scene.

    Emulates the imperfect output of a feed-forward reconstructor: means
    jitter, features rotate away from the teacher embeddings (renormalized),
    opacities wobble. Used by the staged-training protocols so that task-loss
    fine-tuning has genuine reconstruction error to repair.
    """
    out = scene.copy()
    rng = np.random.default_rng(seed)
    out.means += rng.normal(0, mean_noise, out.means.shape)
    noise = rng.normal(0, 1, out.features.shape)
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    mixed = out.features + feature_noise * noise
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    out.features = np.where(norms > 1e-9, mixed / norms, mixed)
    out.opacity_logits += rng.normal(0, opacity_noise, out.opacity_logits.shape)
    return out


def standard_fit_spec(seed: int = 7) -> SceneSpec:
    """The multi-view fitting benchmark: ~4000 Gaussians, six 128x224 views."""
    return SceneSpec(seed=seed)


def bev_protocol_spec(seed: int, clutter: bool = False) -> SceneSpec:
    """Lighter scenes for BEV head training/eval (no perspective references)."""
    return SceneSpec(seed=seed, n_vehicles=7, n_pedestrians=6, clutter=clutter,
                     ground_halfwidth=40.0, ground_spacing=1.5)
