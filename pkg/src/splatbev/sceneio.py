"""Bit-exact binary serialization for scenes, images and maps.

Three tiny fixed-endianness formats, documented byte by byte in the README:

* scene files  magic ``SPB1``, version, per-Gaussian float32 records;
* map files    magic ``SPM1``, float32 H x W x C containers for depth,
               feature, mask and offset maps;
* images       binary PPM (P6, 8-bit), a linear clamp of [0, 1] buffers.

An optional PLY export (viewer-compatible field names) exists for visual
inspection only and is excluded from round-trip guarantees.
"""

from __future__ import annotations

import struct
import numpy as np

from .core import Scene

SCENE_MAGIC = b"SPB1"
MAP_MAGIC = b"SPM1"
VERSION = 1
_SCENE_HEADER = struct.Struct("<4sIQII")  # magic, version, count, feature_dim, flags
_MAP_HEADER = struct.Struct("<4sIIII")    # magic, version, height, width, channels
FLAG_SH_DEGREE1 = 1


class SceneFileError(ValueError):
    """Malformed scene/map file; the message names the failing offset."""


def _record_floats(feature_dim: int, sh_basis: int) -> int:
    return 3 + 3 + 4 + 1 + 3 * sh_basis + feature_dim


def save_scene(scene: Scene, path) -> None:
    """Write a scene as SPB1. Values are stored as little-endian float32."""
    flags = FLAG_SH_DEGREE1 if scene.sh_basis == 4 else 0
    n = len(scene)
    header = _SCENE_HEADER.pack(SCENE_MAGIC, VERSION, n, scene.feature_dim, flags)
    records = np.concatenate([
        scene.means,
        scene.scale_logs,
        scene.rotations,
        scene.opacity_logits[:, None],
        scene.color_coeffs.reshape(n, -1),
        scene.features,
    ], axis=1).astype("<f4") if n else np.zeros((0,), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_scene(path) -> Scene:
    """Read an SPB1 scene, validating header and size consistency."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SCENE_HEADER.size:
        raise SceneFileError(
            f"truncated header: need {_SCENE_HEADER.size} bytes, file has {len(data)}")
    magic, version, count, feature_dim, flags = _SCENE_HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise SceneFileError(f"bad magic {magic!r} at offset 0 (expected {SCENE_MAGIC!r})")
    if version != VERSION:
        raise SceneFileError(f"unsupported scene file version {version}")
    sh_basis = 4 if flags & FLAG_SH_DEGREE1 else 1
    rec = _record_floats(feature_dim, sh_basis)
    expected = _SCENE_HEADER.size + count * rec * 4
    if len(data) != expected:
        raise SceneFileError(
            f"size mismatch: header claims {count} Gaussians "
            f"({expected} bytes), file has {len(data)} bytes")
    raw = np.frombuffer(data, dtype="<f4", offset=_SCENE_HEADER.size)
    vals = raw.reshape(count, rec).astype(np.float64)
    if count == 0:
        return Scene.empty(feature_dim=feature_dim, sh_basis=sh_basis)
    o = 0
    means = vals[:, o:o + 3]; o += 3
    scale_logs = vals[:, o:o + 3]; o += 3
    rotations = vals[:, o:o + 4]; o += 4
    opacity = vals[:, o]; o += 1
    coeffs = vals[:, o:o + 3 * sh_basis].reshape(count, sh_basis, 3); o += 3 * sh_basis
    features = vals[:, o:]
    return Scene(means, scale_logs, rotations, opacity, coeffs, features)


def save_image(buffer: np.ndarray, path) -> None:
    """Write an (H, W, 3) buffer in [0, 1] as binary PPM (P6, 8-bit)."""
    arr = np.asarray(buffer, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image buffer must be (H, W, 3), got {arr.shape}")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_map(buffer: np.ndarray, path) -> None:
    """Write a scalar/feature/mask map as SPM1 (float32 H x W x C)."""
    arr = np.asarray(buffer, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"map buffer must be (H, W) or (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    if c == 0 or h == 0 or w == 0:
        raise ValueError(f"refusing to save degenerate map of shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAP_HEADER.pack(MAP_MAGIC, VERSION, h, w, c))
        fh.write(arr.astype("<f4").tobytes())


def load_map(path) -> np.ndarray:
    """Read an SPM1 map as float64 (H, W, C); single-channel stays 3D."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _MAP_HEADER.size:
        raise SceneFileError(
            f"truncated header: need {_MAP_HEADER.size} bytes, file has {len(data)}")
    magic, version, h, w, c = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise SceneFileError(f"bad magic {magic!r} at offset 0 (expected {MAP_MAGIC!r})")
    if version != VERSION:
        raise SceneFileError(f"unsupported map file version {version}")
    expected = _MAP_HEADER.size + h * w * c * 4
    if len(data) != expected:
        raise SceneFileError(
            f"size mismatch: header claims {h}x{w}x{c} ({expected} bytes), "
            f"file has {len(data)} bytes")
    raw = np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size)
    return raw.reshape(h, w, c).astype(np.float64)


def export_ply(scene: Scene, path) -> None:
    """Viewer-compatible point-cloud export; inspection only, lossy layout."""
    n = len(scene)
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    n_rest = 3 * (scene.sh_basis - 1)
    props += [f"f_rest_{i}" for i in range(n_rest)]
    props += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    cols = [scene.means, np.zeros((n, 3)), scene.color_coeffs[:, 0, :]]
    if n_rest:
        # Viewer layout groups rest coefficients channel-major.
        cols.append(np.swapaxes(scene.color_coeffs[:, 1:, :], 1, 2).reshape(n, -1))
    cols += [scene.opacity_logits[:, None], scene.scale_logs, scene.rotations]
    body = np.concatenate(cols, axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body.tobytes())
