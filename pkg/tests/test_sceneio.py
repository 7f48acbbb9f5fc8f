import numpy as np
import pytest

from splatbev.core import Scene
from splatbev.sceneio import (SceneFileError, export_ply, load_map, load_scene,
                              save_image, save_map, save_scene)
from tests.conftest import random_scene


def f32_scene(rng, n, sh_basis=1, feature_dim=6):
    """Random scene whose parameters are exactly float32-representable."""
    scene = random_scene(rng, n, feature_dim=feature_dim, sh_basis=sh_basis)
    for arr in scene.param_arrays().values():
        arr[:] = arr.astype(np.float32)
    return scene


class TestSceneRoundTrip:
    def test_empty_scene(self, tmp_path):
        path = tmp_path / "empty.spb"
        save_scene(Scene.empty(feature_dim=16), path)
        assert path.stat().st_size == 24  # header only
        loaded = load_scene(path)
        assert len(loaded) == 0
        assert loaded.feature_dim == 16

    def test_thousand_gaussians_bit_exact(self, rng, tmp_path):
        scene = f32_scene(rng, 1000)
        path = tmp_path / "scene.spb"
        save_scene(scene, path)
        loaded = load_scene(path)
        for name, arr in scene.param_arrays().items():
            assert arr.tobytes() == loaded.param_arrays()[name].tobytes(), name

    def test_degree1_sh_round_trip(self, rng, tmp_path):
        scene = f32_scene(rng, 17, sh_basis=4)
        path = tmp_path / "sh.spb"
        save_scene(scene, path)
        loaded = load_scene(path)
        assert loaded.sh_basis == 4
        assert scene.color_coeffs.tobytes() == loaded.color_coeffs.tobytes()

    def test_save_load_save_is_identical(self, rng, tmp_path):
        scene = random_scene(rng, 50)  # float64 values: file is canonical
        a, b = tmp_path / "a.spb", tmp_path / "b.spb"
        save_scene(scene, a)
        save_scene(load_scene(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_truncated_file_names_lengths(self, rng, tmp_path):
        path = tmp_path / "trunc.spb"
        save_scene(f32_scene(rng, 10), path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 7])  # cut mid-record
        with pytest.raises(SceneFileError, match="bytes"):
            load_scene(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spb"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(SceneFileError, match="magic"):
            load_scene(path)

    def test_unknown_version(self, rng, tmp_path):
        path = tmp_path / "v9.spb"
        save_scene(f32_scene(rng, 1), path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(SceneFileError, match="version"):
            load_scene(path)


class TestImages:
    def test_white_image_bytes(self, tmp_path):
        path = tmp_path / "white.ppm"
        save_image(np.ones((2, 2, 3)), path)
        assert path.read_bytes() == b"P6\n2 2\n255\n" + b"\xff" * 12

    def test_clamps_out_of_range(self, tmp_path):
        path = tmp_path / "clamp.ppm"
        save_image(np.array([[[2.0, -1.0, 0.5]]]), path)
        data = path.read_bytes()
        assert data.endswith(bytes([255, 0, 128]))

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            save_image(np.ones((4, 4)), tmp_path / "x.ppm")


class TestMaps:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        arr = rng.normal(0, 1, (7, 5, 3)).astype(np.float32).astype(np.float64)
        path = tmp_path / "m.spm"
        save_map(arr, path)
        loaded = load_map(path)
        assert loaded.tobytes() == arr.tobytes()

    def test_scalar_map_gets_channel_axis(self, rng, tmp_path):
        arr = rng.normal(0, 1, (4, 6)).astype(np.float32).astype(np.float64)
        path = tmp_path / "s.spm"
        save_map(arr, path)
        assert load_map(path).shape == (4, 6, 1)

    def test_zero_channels_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_map(np.zeros((4, 4, 0)), tmp_path / "zero.spm")

    def test_size_mismatch_detected(self, rng, tmp_path):
        path = tmp_path / "short.spm"
        save_map(rng.normal(0, 1, (4, 4)), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(SceneFileError, match="bytes"):
            load_map(path)


class TestGoldens:
    """Serialization pinned against committed reference bytes."""

    def golden_scene(self):
        rng = np.random.default_rng(42)
        return f32_scene(rng, 3, feature_dim=4)

    def test_scene_matches_golden(self, tmp_path):
        from pathlib import Path
        golden = Path(__file__).parent / "golden" / "scene.spb"
        path = tmp_path / "scene.spb"
        save_scene(self.golden_scene(), path)
        assert path.read_bytes() == golden.read_bytes()

    def test_map_matches_golden(self, tmp_path):
        from pathlib import Path
        golden = Path(__file__).parent / "golden" / "map.spm"
        rng = np.random.default_rng(43)
        arr = rng.normal(0, 1, (5, 4, 2))
        path = tmp_path / "map.spm"
        save_map(arr, path)
        assert path.read_bytes() == golden.read_bytes()

    def test_image_matches_golden(self, tmp_path):
        from pathlib import Path
        golden = Path(__file__).parent / "golden" / "image.ppm"
        rng = np.random.default_rng(44)
        img = rng.uniform(0, 1, (6, 8, 3))
        path = tmp_path / "image.ppm"
        save_image(img, path)
        assert path.read_bytes() == golden.read_bytes()


def test_ply_export_header_and_size(rng, tmp_path):
    scene = f32_scene(rng, 12)
    path = tmp_path / "scene.ply"
    export_ply(scene, path)
    data = path.read_bytes()
    assert data.startswith(b"ply\nformat binary_little_endian 1.0\n")
    header_end = data.index(b"end_header\n") + len(b"end_header\n")
    n_props = data[:header_end].count(b"property float")
    assert len(data) - header_end == 12 * n_props * 4
