"""Procedural test scene: a textured cube on a checkered ground plane.

Ground-truth images are rendered from a solid triangle soup, so a trained
soup can represent the scene exactly; train/held-out views sit on a circle
around the scene.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose
from .render import render
from .scene_io import SceneView, SfmScene, save_render, write_native_scene
from .sh import C0
from .soup import TriangleSoup
from .training import TrainView

SIGMA_SOLID = 0.05
BACKGROUND = (0.05, 0.05, 0.1)


def _quad(p00, p10, p01, p11):
    """Two triangles covering the quad spanned by corner points."""
    return [np.stack([p00, p10, p11]), np.stack([p00, p11, p01])]


def _face_triangles(origin, du, dv, base_color, cells, tris, colors, alt_color):
    for i in range(cells):
        for j in range(cells):
            p00 = origin + du * (i / cells) + dv * (j / cells)
            p10 = origin + du * ((i + 1) / cells) + dv * (j / cells)
            p01 = origin + du * (i / cells) + dv * ((j + 1) / cells)
            p11 = origin + du * ((i + 1) / cells) + dv * ((j + 1) / cells)
            color = base_color if (i + j) % 2 == 0 else alt_color
            # mild gradient across the face so every cell is distinct
            shade = 0.75 + 0.25 * (i + j) / (2 * cells - 1) if cells > 1 else 1.0
            for t in _quad(p00, p10, p01, p11):
                tris.append(t)
                colors.append(np.clip(color * shade, 0.0, 1.0))


def make_ground_truth_soup(cells: int = 3) -> TriangleSoup:
    """Solid triangle soup of the cube-and-plane scene."""
    tris: list = []
    colors: list = []
    h = 0.5
    # cube faces: (origin corner, two edge vectors, two checker colors)
    ex, ey, ez = np.eye(3)
    faces = [
        (np.array([-h, -h, -h]), 2 * h * ex, 2 * h * ey, np.array([0.9, 0.2, 0.2]),
         np.array([0.95, 0.85, 0.3])),                       # front  (z = -h)
        (np.array([-h, -h, h]), 2 * h * ex, 2 * h * ey, np.array([0.2, 0.45, 0.9]),
         np.array([0.85, 0.9, 0.95])),                       # back   (z = +h)
        (np.array([-h, -h, -h]), 2 * h * ez, 2 * h * ey, np.array([0.2, 0.75, 0.3]),
         np.array([0.9, 0.55, 0.15])),                       # left   (x = -h)
        (np.array([h, -h, -h]), 2 * h * ez, 2 * h * ey, np.array([0.75, 0.25, 0.8]),
         np.array([0.95, 0.7, 0.85])),                       # right  (x = +h)
        (np.array([-h, -h, -h]), 2 * h * ex, 2 * h * ez, np.array([0.25, 0.8, 0.8]),
         np.array([0.95, 0.95, 0.9])),                       # top    (y = -h, camera up)
    ]
    for origin, du, dv, c0, c1 in faces:
        _face_triangles(origin, du, dv, c0, cells, tris, colors, c1)
    # ground plane at the cube's base (y points down in camera convention)
    g = 2.2
    origin = np.array([-g, h, -g])
    _face_triangles(origin, 2 * g * ex, 2 * g * ez,
                    np.array([0.75, 0.75, 0.7]), 6, tris, colors,
                    np.array([0.25, 0.35, 0.25]))
    n = len(tris)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (np.stack(colors) - 0.5) / C0
    return TriangleSoup(vertices=np.stack(tris), opacity=np.ones(n),
                        sigma=np.full(n, SIGMA_SOLID), sh=sh, solid=True)


def look_at(center: np.ndarray, target: np.ndarray) -> CameraPose:
    """World-to-camera pose with +z toward the target, y-down convention."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return CameraPose(rotation=r, translation=-r @ center)


def make_views(n_train: int = 24, n_test: int = 4,
               size: int = 128) -> tuple[CameraIntrinsics, list]:
    """Cameras on a circle around the scene; returns (intrinsics, list of
    (name, pose, split))."""
    intr = CameraIntrinsics(fx=1.1 * size, fy=1.1 * size, cx=size / 2.0,
                            cy=size / 2.0, width=size, height=size)
    target = np.array([0.0, 0.1, 0.0])
    entries = []
    for i in range(n_train):
        angle = 2.0 * np.pi * i / n_train
        radius = 3.0 + 0.3 * (i % 3)
        height = -1.1 - 0.4 * (i % 2)
        center = np.array([radius * np.cos(angle), height,
                           radius * np.sin(angle)])
        entries.append((f"train_{i:03d}", look_at(center, target), "train"))
    for i in range(n_test):
        angle = 2.0 * np.pi * (i + 0.37) / n_test
        center = np.array([3.15 * np.cos(angle), -1.3, 3.15 * np.sin(angle)])
        entries.append((f"test_{i:03d}", look_at(center, target), "test"))
    return intr, entries


def make_dataset(n_train: int = 24, n_test: int = 4, size: int = 128,
                 cells: int = 3):
    """Ground-truth soup plus rendered TrainViews for every camera.

    Returns (soup, train_views, test_views).
    """
    soup = make_ground_truth_soup(cells)
    intr, entries = make_views(n_train, n_test, size)
    train, test = [], []
    for name, pose, split in entries:
        out = render(soup, intr, pose, background=BACKGROUND)
        view = TrainView(intr=intr, pose=pose, image=out.image.rgb, name=name)
        (train if split == "train" else test).append(view)
    return soup, train, test


def write_scene_dir(directory, n_train: int = 24, n_test: int = 4,
                    size: int = 128, cells: int = 3) -> SfmScene:
    """Materialize the synthetic scene as a native scene directory with
    PNG images and an empty point cloud (SfM-free)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    soup = make_ground_truth_soup(cells)
    intr, entries = make_views(n_train, n_test, size)
    views = []
    for name, pose, split in entries:
        out = render(soup, intr, pose, background=BACKGROUND)
        rel = f"images/{name}.png"
        save_render(out.image, directory / rel)
        views.append(SceneView(name=name, camera_id=0, pose=pose,
                               image_path=str(directory / rel), split=split))
    scene = SfmScene(cameras={0: intr}, views=views,
                     points=np.zeros((0, 3)), point_colors=np.zeros((0, 3)))
    write_native_scene(scene, directory)
    return scene
