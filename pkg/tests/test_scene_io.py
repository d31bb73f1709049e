"""Scene parsing, triangle initialization, metrics, export and model files."""
import numpy as np
import pytest
from PIL import Image

from trisplat.config import InitConfig
from trisplat.geometry import CameraIntrinsics, CameraPose
from trisplat.render import render
from trisplat.scene_io import (SceneView, SfmScene, compute_metrics,
                               export_mesh, import_ply, init_triangles,
                               load_model, load_scene, load_train_views,
                               quaternion_to_rotation, save_model, save_render,
                               soup_colors, write_native_scene)
from trisplat.soup import TriangleSoup
from trisplat.synthetic import make_ground_truth_soup, write_scene_dir

from conftest import random_pose


def write_colmap_fixture(root, n_points=10):
    """Minimal COLMAP text export: 1 camera, 2 views, n points."""
    sparse = root / "sparse" / "0"
    sparse.mkdir(parents=True)
    images = root / "images"
    images.mkdir()
    (sparse / "cameras.txt").write_text(
        "# camera list\n"
        "1 PINHOLE 32 24 30.0 31.0 16.0 12.0\n")
    (sparse / "images.txt").write_text(
        "# image list: two lines per image\n"
        "1 1 0 0 0 0.1 0.2 0.3 1 view_a.png\n"
        "1.0 2.0 1 3.0 4.0 2\n"
        "2 1 0 0 0 0.0 0.0 1.0 1 view_b.png\n"
        "5.0 6.0 1\n")
    lines = ["# 3D point list"]
    rng = np.random.default_rng(0)
    for i in range(n_points):
        x, y, z = rng.uniform(-1, 1, 3)
        lines.append(f"{i + 1} {x} {y} {z} 100 150 200 0.5")
    (sparse / "points3D.txt").write_text("\n".join(lines) + "\n")
    for name in ("view_a.png", "view_b.png"):
        Image.fromarray(np.zeros((24, 32, 3), dtype=np.uint8)).save(images / name)
    return root


class TestColmap:
    def test_minimal_fixture(self, tmp_path):
        scene = load_scene(write_colmap_fixture(tmp_path))
        assert len(scene.cameras) == 1
        assert len(scene.views) == 2
        assert len(scene.points) == 10
        cam = scene.cameras[1]
        assert (cam.fx, cam.fy, cam.cx, cam.cy) == (30.0, 31.0, 16.0, 12.0)
        assert np.allclose(scene.views[0].pose.rotation, np.eye(3))
        assert np.allclose(scene.point_colors[0], [100 / 255, 150 / 255, 200 / 255])

    def test_unsupported_camera_model(self, tmp_path):
        write_colmap_fixture(tmp_path)
        cams = tmp_path / "sparse" / "0" / "cameras.txt"
        cams.write_text("1 OPENCV 32 24 30 30 16 12 0 0 0 0\n")
        with pytest.raises(ValueError, match="OPENCV"):
            load_scene(tmp_path)

    def test_malformed_line_reports_location(self, tmp_path):
        write_colmap_fixture(tmp_path)
        pts = tmp_path / "sparse" / "0" / "points3D.txt"
        pts.write_text("1 not-a-number 0 0 1 2 3\n")
        with pytest.raises(ValueError, match="points3D.txt:1"):
            load_scene(tmp_path)

    def test_missing_file(self, tmp_path):
        (tmp_path / "sparse" / "0").mkdir(parents=True)
        with pytest.raises(FileNotFoundError):
            load_scene(tmp_path)

    def test_empty_points_is_valid(self, tmp_path):
        write_colmap_fixture(tmp_path, n_points=0)
        scene = load_scene(tmp_path)
        assert len(scene.points) == 0
        tris = init_triangles(scene, InitConfig(fallback_points=50),
                              np.random.default_rng(0))
        assert len(tris) == 50

    def test_every_eighth_view_held_out(self, tmp_path):
        sparse = tmp_path / "sparse" / "0"
        sparse.mkdir(parents=True)
        (sparse / "cameras.txt").write_text("1 SIMPLE_PINHOLE 8 8 10 4 4\n")
        lines = []
        for i in range(16):
            lines.append(f"{i + 1} 1 0 0 0 0 0 1 1 img_{i:02d}.png")
            lines.append("0.0 0.0 -1")
        (sparse / "images.txt").write_text("\n".join(lines) + "\n")
        (sparse / "points3D.txt").write_text("")
        scene = load_scene(tmp_path)
        splits = [v.split for v in scene.views]
        assert splits.count("test") == 2
        assert splits[7] == "test" and splits[15] == "test"


class TestNativeFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        intr = CameraIntrinsics(fx=50.5, fy=49.25, cx=16.125, cy=12.0625,
                                width=32, height=24)
        views = [SceneView(name=f"v{i}", camera_id=0, pose=random_pose(rng),
                           image_path=str(tmp_path / f"v{i}.png"),
                           split="train" if i else "test")
                 for i in range(3)]
        points = rng.normal(size=(5, 3))
        colors = rng.uniform(0, 1, (5, 3))
        scene = SfmScene(cameras={0: intr}, views=views, points=points,
                         point_colors=colors)
        write_native_scene(scene, tmp_path)
        loaded = load_scene(tmp_path)
        assert len(loaded.views) == 3
        cam = loaded.cameras[0]
        assert (cam.fx, cam.fy, cam.cx, cam.cy) == (50.5, 49.25, 16.125, 12.0625)
        for a, b in zip(loaded.views, views):
            assert a.name == b.name and a.split == b.split
            assert np.array_equal(a.pose.rotation, b.pose.rotation)
            assert np.array_equal(a.pose.translation, b.pose.translation)
        assert np.array_equal(loaded.points, points)
        assert np.array_equal(loaded.point_colors, colors)

    def test_malformed_line(self, tmp_path):
        (tmp_path / "scene.txt").write_text("camera 0 32 24 10 10\nnonsense\n")
        with pytest.raises(ValueError, match="scene.txt:1"):
            load_scene(tmp_path)


class TestQuaternion:
    def test_identity(self):
        assert np.allclose(quaternion_to_rotation(1, 0, 0, 0), np.eye(3))

    def test_half_turn_about_z(self):
        r = quaternion_to_rotation(0, 0, 0, 1)
        assert np.allclose(r, np.diag([-1.0, -1.0, 1.0]))

    def test_zero_quaternion_raises(self):
        with pytest.raises(ValueError):
            quaternion_to_rotation(0, 0, 0, 0)


class TestInitTriangles:
    def _scene(self, points, colors=None):
        intr = CameraIntrinsics(fx=10, fy=10, cx=8, cy=8, width=16, height=16)
        pose = CameraPose(rotation=np.eye(3), translation=np.array([0, 0, 3.0]))
        view = SceneView(name="v", camera_id=0, pose=pose, image_path="x.png")
        if colors is None:
            colors = np.full((len(points), 3), 0.5)
        return SfmScene(cameras={0: intr}, views=[view],
                        points=np.asarray(points, dtype=float),
                        point_colors=colors)

    def test_vertex_distance_is_k_times_d(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(20, 3))
        scene = self._scene(points)
        cfg = InitConfig()
        tris = init_triangles(scene, cfg, np.random.default_rng(3))
        assert len(tris) == 20
        from scipy.spatial import cKDTree
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=cfg.knn + 1)
        d = dist[:, 1:].mean(axis=1)
        for i, tri in enumerate(tris):
            radii = np.linalg.norm(tri.vertices - points[i], axis=1)
            assert np.allclose(radii, cfg.k * d[i], rtol=1e-12)
            assert tri.opacity == 0.28
            assert tri.sigma == 1.16

    def test_two_point_cloud_uses_mutual_distance(self):
        points = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        tris = init_triangles(self._scene(points), InitConfig(),
                              np.random.default_rng(4))
        for i, tri in enumerate(tris):
            radii = np.linalg.norm(tri.vertices - points[i], axis=1)
            assert np.allclose(radii, 2.2 * 1.0)

    def test_min_angle_respected(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(30, 3))
        tris = init_triangles(self._scene(points), InitConfig(),
                              np.random.default_rng(6))
        from trisplat.scene_io import _min_angle_deg
        for tri in tris:
            assert _min_angle_deg(tri.vertices) >= 10.0

    def test_color_seeds_degree_zero(self):
        colors = np.array([[0.9, 0.2, 0.4]])
        tris = init_triangles(self._scene([[0.0, 0, 0]], colors), InitConfig(),
                              np.random.default_rng(7))
        assert np.allclose(soup_colors(TriangleSoup.from_triangles(tris))[0],
                           colors[0], atol=1e-12)

    def test_reproducible(self):
        rng = np.random.default_rng(8)
        scene = self._scene(rng.normal(size=(10, 3)))
        a = init_triangles(scene, InitConfig(), np.random.default_rng(9))
        b = init_triangles(scene, InitConfig(), np.random.default_rng(9))
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.vertices, tb.vertices)


class TestMetrics:
    def test_identical_images(self):
        x = np.random.default_rng(10).uniform(0, 1, (16, 16, 3))
        psnr, ssim_val = compute_metrics(x, x)
        assert psnr == 100.0
        assert ssim_val == pytest.approx(1.0)

    def test_uniform_mse(self):
        x = np.zeros((16, 16, 3))
        y = np.full((16, 16, 3), 0.1)  # MSE = 0.01
        psnr, _ = compute_metrics(x, y)
        assert psnr == pytest.approx(20.0)

    def test_anticorrelated_ssim_negative(self):
        # strong inverted pattern: structure term dominates and goes negative
        ys, xs = np.mgrid[0:32, 0:32]
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * xs / 8) * np.sin(2 * np.pi * ys / 8)
        x = np.repeat(pattern[..., None], 3, axis=2)
        y = 1.0 - x
        _, ssim_val = compute_metrics(x, y)
        assert ssim_val < 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestExport:
    def solid_soup(self, n=20):
        soup = make_ground_truth_soup(cells=1)
        return soup.select(np.arange(min(n, len(soup))))

    def test_ply_counts_and_header(self, tmp_path):
        soup = self.solid_soup()
        path = export_mesh(soup, tmp_path / "mesh.ply", "ply")
        header = path.read_bytes().split(b"end_header")[0].decode()
        assert f"element vertex {3 * len(soup)}" in header
        assert f"element face {len(soup)}" in header
        assert "binary_little_endian" in header

    def test_all_zero_sh_is_mid_gray(self, tmp_path):
        soup = TriangleSoup(vertices=np.eye(3)[None], opacity=np.ones(1),
                            sigma=np.full(1, 0.05), sh=np.zeros((1, 16, 3)),
                            solid=True)
        path = export_mesh(soup, tmp_path / "gray.ply", "ply")
        re_soup = import_ply(path)
        gray = np.round(0.5 * 255) / 255.0
        assert np.allclose(soup_colors(re_soup), gray, atol=1e-12)

    def test_round_trip_positions_bit_exact(self, tmp_path):
        soup = self.solid_soup()
        path = export_mesh(soup, tmp_path / "mesh.ply", "ply")
        re_soup = import_ply(path)
        assert len(re_soup) == len(soup)
        # positions are stored as float32; re-export must be byte-identical
        assert np.array_equal(re_soup.vertices,
                              soup.vertices.astype(np.float32).astype(np.float64))
        path2 = export_mesh(re_soup, tmp_path / "mesh2.ply", "ply")
        assert path.read_bytes() == path2.read_bytes()

    def test_obj_with_material_sidecar(self, tmp_path):
        soup = self.solid_soup(4)
        path = export_mesh(soup, tmp_path / "mesh.obj", "obj")
        text = path.read_text()
        assert text.count("\nf ") == len(soup)
        mtl = (tmp_path / "mesh.mtl").read_text()
        assert mtl.count("newmtl") == len(soup)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_mesh(self.solid_soup(1), tmp_path / "x.stl", "stl")


class TestSaveRender:
    def test_quantization(self, tmp_path):
        img = np.zeros((2, 2, 3))
        img[0, 0] = 0.5
        img[0, 1] = 1.2
        img[1, 0] = -0.3
        save_render(img, tmp_path / "out.png")
        data = np.asarray(Image.open(tmp_path / "out.png"))
        assert tuple(data[0, 0]) == (128, 128, 128)
        assert tuple(data[0, 1]) == (255, 255, 255)
        assert tuple(data[1, 0]) == (0, 0, 0)
        assert tuple(data[1, 1]) == (0, 0, 0)


class TestModelFiles:
    def test_round_trip_with_cameras(self, tmp_path):
        scene = write_scene_dir(tmp_path / "scene", n_train=3, n_test=1,
                                size=16, cells=1)
        soup = make_ground_truth_soup(cells=1)
        save_model(tmp_path / "model.npz", soup, scene)
        re_soup, views = load_model(tmp_path / "model.npz")
        assert np.array_equal(re_soup.vertices, soup.vertices)
        assert re_soup.solid == soup.solid
        assert len(views) == 4
        names = [v[0] for v in views]
        assert "train_000" in names and "test_000" in names

    def test_round_trip_without_cameras(self, tmp_path):
        soup = make_ground_truth_soup(cells=1)
        save_model(tmp_path / "model.npz", soup)
        re_soup, views = load_model(tmp_path / "model.npz")
        assert views is None
        assert np.array_equal(re_soup.sh, soup.sh)


class TestSceneDir:
    def test_synthetic_scene_loads_and_renders(self, tmp_path):
        write_scene_dir(tmp_path, n_train=2, n_test=1, size=16, cells=1)
        scene = load_scene(tmp_path)
        train_views = load_train_views(scene, "train")
        test_views = load_train_views(scene, "test")
        assert len(train_views) == 2 and len(test_views) == 1
        soup = make_ground_truth_soup(cells=1)
        out = render(soup, train_views[0].intr, train_views[0].pose,
                     background=(0.05, 0.05, 0.1))
        # saved PNG is the quantized render
        assert np.abs(out.image.rgb - train_views[0].image).max() <= 0.5 / 255 + 1e-9
