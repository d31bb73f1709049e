"""Scene ingestion, triangle initialization, metrics and mesh export.

Two scene layouts are accepted: COLMAP text exports (cameras.txt,
images.txt, points3D.txt plus an images folder) and a plain-text native
format (scene.txt) used for synthetic fixtures; see the README for the
native grammar.  Meshes are exported as binary PLY or OBJ with a material
sidecar.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .config import InitConfig
from .geometry import CameraIntrinsics, CameraPose, Triangle3D
from .losses import ssim as _ssim
from .sh import C0
from .soup import TriangleSoup, as_soup
from .training import TrainView

HOLDOUT_EVERY = 8  # COLMAP scenes: every 8th view (by name) is held out


@dataclass
class SceneView:
    name: str
    camera_id: int
    pose: CameraPose
    image_path: str
    split: str = "train"  # "train" or "test"


@dataclass
class SfmScene:
    cameras: dict            # camera id -> CameraIntrinsics
    views: list              # list of SceneView
    points: np.ndarray       # (P,3) world positions
    point_colors: np.ndarray  # (P,3) RGB in [0,1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.point_colors = np.asarray(self.point_colors,
                                       dtype=np.float64).reshape(-1, 3)
        if not self.views:
            raise ValueError("scene has no views")
        for v in self.views:
            if v.camera_id not in self.cameras:
                raise ValueError(f"view '{v.name}' references unknown camera "
                                 f"{v.camera_id}")


def quaternion_to_rotation(qw, qx, qy, qz) -> np.ndarray:
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _fmt(x) -> str:
    """Shortest decimal that round-trips a float64."""
    return f"{float(x):.17g}"


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            yield lineno, text


def _parse_error(path, lineno, msg):
    return ValueError(f"{path}:{lineno}: {msg}")


def _load_colmap_cameras(path: Path) -> dict:
    cameras = {}
    for lineno, text in _data_lines(path):
        parts = text.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError):
            raise _parse_error(path, lineno, f"malformed camera line: '{text}'")
        if model == "PINHOLE":
            if len(params) != 4:
                raise _parse_error(path, lineno, "PINHOLE expects 4 parameters")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise _parse_error(path, lineno, "SIMPLE_PINHOLE expects 3 parameters")
            f, cx, cy = params
            fx = fy = f
        else:
            raise _parse_error(path, lineno, f"unsupported camera model '{model}'")
        cameras[cam_id] = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                           width=width, height=height)
    return cameras


def _load_colmap_images(path: Path, images_dir: Path) -> list:
    views = []
    expect_pose = True
    for lineno, text in _data_lines(path):
        if not expect_pose:
            # the second line per image carries 2D point tracks; skipped
            expect_pose = True
            continue
        parts = text.split()
        if len(parts) < 10:
            raise _parse_error(path, lineno, f"malformed image line: '{text}'")
        try:
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            cam_id = int(parts[8])
        except ValueError:
            raise _parse_error(path, lineno, f"malformed image line: '{text}'")
        name = parts[9]
        pose = CameraPose(rotation=quaternion_to_rotation(qw, qx, qy, qz),
                          translation=np.array([tx, ty, tz]))
        views.append(SceneView(name=name, camera_id=cam_id, pose=pose,
                               image_path=str(images_dir / name)))
        expect_pose = False
    views.sort(key=lambda v: v.name)
    for i, v in enumerate(views):
        v.split = "test" if (i % HOLDOUT_EVERY) == HOLDOUT_EVERY - 1 else "train"
    return views


def _load_colmap_points(path: Path):
    pts = []
    cols = []
    for lineno, text in _data_lines(path):
        parts = text.split()
        if len(parts) < 7:
            raise _parse_error(path, lineno, f"malformed point line: '{text}'")
        try:
            pts.append([float(p) for p in parts[1:4]])
            cols.append([int(p) / 255.0 for p in parts[4:7]])
        except ValueError:
            raise _parse_error(path, lineno, f"malformed point line: '{text}'")
    return (np.asarray(pts).reshape(-1, 3), np.asarray(cols).reshape(-1, 3))


def _load_native_scene(scene_file: Path) -> SfmScene:
    root = scene_file.parent
    cameras = {}
    views = []
    pts = []
    cols = []
    for lineno, text in _data_lines(scene_file):
        parts = text.split()
        kind = parts[0]
        try:
            if kind == "camera":
                cam_id = int(parts[1])
                width, height = int(parts[2]), int(parts[3])
                fx, fy, cx, cy = (float(p) for p in parts[4:8])
                cameras[cam_id] = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                                   width=width, height=height)
            elif kind == "view":
                name, cam_id, split, rel = parts[1], int(parts[2]), parts[3], parts[4]
                vals = [float(p) for p in parts[5:17]]
                if len(vals) != 12 or split not in ("train", "test"):
                    raise ValueError
                pose = CameraPose(rotation=np.array(vals[:9]).reshape(3, 3),
                                  translation=np.array(vals[9:12]))
                views.append(SceneView(name=name, camera_id=cam_id, pose=pose,
                                       image_path=str(root / rel), split=split))
            elif kind == "point":
                vals = [float(p) for p in parts[1:7]]
                if len(vals) != 6:
                    raise ValueError
                pts.append(vals[:3])
                cols.append(vals[3:6])
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise _parse_error(scene_file, lineno, f"malformed line: '{text}'")
    return SfmScene(cameras=cameras, views=views,
                    points=np.asarray(pts).reshape(-1, 3),
                    point_colors=np.asarray(cols).reshape(-1, 3))


def write_native_scene(scene: SfmScene, directory) -> Path:
    """Write a scene in the native plain-text format (scene.txt)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "scene.txt"
    with open(out, "w", encoding="utf-8") as f:
        f.write("# native scene fixture\n")
        for cam_id, c in sorted(scene.cameras.items()):
            f.write(f"camera {cam_id} {c.width} {c.height} "
                    f"{_fmt(c.fx)} {_fmt(c.fy)} {_fmt(c.cx)} {_fmt(c.cy)}\n")
        for v in scene.views:
            rel = os.path.relpath(v.image_path, directory)
            rvals = " ".join(_fmt(x) for x in v.pose.rotation.reshape(9))
            tvals = " ".join(_fmt(x) for x in v.pose.translation)
            f.write(f"view {v.name} {v.camera_id} {v.split} {rel} {rvals} {tvals}\n")
        for p, c in zip(scene.points, scene.point_colors):
            f.write("point " + " ".join(_fmt(x) for x in p)
                    + " " + " ".join(_fmt(x) for x in c) + "\n")
    return out


def load_scene(path) -> SfmScene:
    """Load a COLMAP text export or a native scene.txt directory."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    native = root / "scene.txt"
    if native.exists():
        return _load_native_scene(native)
    sparse = root / "sparse" / "0" if (root / "sparse" / "0").is_dir() else root
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (sparse / name).exists():
            raise FileNotFoundError(f"missing {sparse / name} (and no scene.txt)")
    cameras = _load_colmap_cameras(sparse / "cameras.txt")
    images_dir = root / "images" if (root / "images").is_dir() else root
    views = _load_colmap_images(sparse / "images.txt", images_dir)
    points, colors = _load_colmap_points(sparse / "points3D.txt")
    return SfmScene(cameras=cameras, views=views, points=points,
                    point_colors=colors)


def _focus_ball(scene: SfmScene) -> tuple[np.ndarray, float]:
    """Center and radius of the region the cameras look at.

    The center is the least-squares closest point to all optical axes; the
    radius is a fraction of the median camera distance to that center, which
    covers the subject of an inward-facing capture.
    """
    a_sum = np.zeros((3, 3))
    b_sum = np.zeros(3)
    centers = []
    for v in scene.views:
        c = v.pose.camera_center()
        d = v.pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        p = np.eye(3) - np.outer(d, d)
        a_sum += p
        b_sum += p @ c
        centers.append(c)
    centers = np.stack(centers)
    try:
        center = np.linalg.solve(a_sum, b_sum)
    except np.linalg.LinAlgError:
        # all axes parallel (forward-facing capture): fall back to a point
        # one camera-spread ahead of the mean camera
        d = scene.views[0].pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        spread = max(np.linalg.norm(centers - centers.mean(axis=0),
                                    axis=1).max(), 1.0)
        center = centers.mean(axis=0) + 2.0 * spread * d
    dist = np.median(np.linalg.norm(centers - center, axis=1))
    return center, 0.75 * max(dist, 1e-3)


def _min_angle_deg(vertices: np.ndarray) -> float:
    angles = []
    for i in range(3):
        a = vertices[(i + 1) % 3] - vertices[i]
        b = vertices[(i + 2) % 3] - vertices[i]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        cosv = np.clip(a @ b / (na * nb), -1.0, 1.0)
        angles.append(math.degrees(math.acos(cosv)))
    return min(angles)


def _unit_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def init_triangles(scene: SfmScene, cfg: InitConfig,
                   rng: np.random.Generator) -> list[Triangle3D]:
    """One triangle per SfM point: vertices at distance k*d along random
    unit directions, where d is the mean distance to the point's nearest
    neighbors.  Directions are redrawn until the triangle's minimum angle
    reaches the configured threshold.  An empty cloud falls back to random
    points inside the ball the cameras look at, with mid-gray color.
    """
    points = scene.points
    colors = scene.point_colors
    if len(points) == 0:
        center, radius = _focus_ball(scene)
        u = _unit_sphere(rng, cfg.fallback_points)
        points = center + radius * rng.uniform(0, 1, (cfg.fallback_points, 1)) ** (1 / 3) * u
        colors = np.full((cfg.fallback_points, 3), 0.5)

    n = len(points)
    if n == 1:
        d = np.array([1.0])
    else:
        tree = cKDTree(points)
        k = min(cfg.knn, n - 1)
        dist, _ = tree.query(points, k=k + 1)  # first neighbor is the point itself
        d = dist[:, 1:].mean(axis=1)

    triangles = []
    for i in range(n):
        radius = cfg.k * d[i]
        for _ in range(1000):
            u = _unit_sphere(rng, 3)
            verts = points[i] + radius * u
            if _min_angle_deg(verts) >= cfg.min_angle_deg:
                break
        sh = np.zeros((16, 3))
        sh[0] = (np.clip(colors[i], 0.0, 1.0) - 0.5) / C0
        triangles.append(Triangle3D(vertices=verts, opacity=cfg.init_opacity,
                                    sigma=cfg.init_sigma, sh=sh))
    return triangles


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_train_views(scene: SfmScene, split: str = "train") -> list[TrainView]:
    views = []
    for v in scene.views:
        if split != "all" and v.split != split:
            continue
        views.append(TrainView(intr=scene.cameras[v.camera_id], pose=v.pose,
                               image=load_image(v.image_path), name=v.name))
    return views


def compute_metrics(rendered, target) -> tuple[float, float]:
    """(PSNR dB capped at 100, mean SSIM) between two [0,1] images."""
    r = np.asarray(getattr(rendered, "rgb", rendered), dtype=np.float64)
    t = np.asarray(getattr(target, "rgb", target), dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"image dimensions differ: {r.shape} vs {t.shape}")
    mse = float(np.mean((r - t) ** 2))
    psnr = 100.0 if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)
    return psnr, _ssim(r, t)


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def soup_colors(soup: TriangleSoup) -> np.ndarray:
    """Degree-0 RGB per triangle (offset applied, clamped to [0,1])."""
    return np.clip(C0 * soup.sh[:, 0, :] + 0.5, 0.0, 1.0)


def export_mesh(triangles, path, format: str = "ply") -> Path:
    """Write a triangle soup as a mesh: 3N unshared vertices, N faces.

    PLY is binary little-endian with float32 positions and uchar RGB from
    the degree-0 color; OBJ writes a sidecar .mtl with one material per
    face color.
    """
    soup = as_soup(triangles)
    path = Path(path)
    fmt = format.lower()
    if fmt == "ply":
        return _export_ply(soup, path)
    if fmt == "obj":
        return _export_obj(soup, path)
    raise ValueError(f"unsupported mesh format '{format}' (ply or obj)")


def _export_ply(soup: TriangleSoup, path: Path) -> Path:
    n = len(soup)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {3 * n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        f"element face {n}\n"
        "property list int int vertex_indices\n"
        "end_header\n"
    )
    vdtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    verts = np.zeros(3 * n, dtype=vdtype)
    pos = soup.vertices.reshape(3 * n, 3).astype(np.float32)
    verts["x"], verts["y"], verts["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rgb = np.repeat(_quantize(soup_colors(soup)), 3, axis=0)
    verts["red"], verts["green"], verts["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    fdtype = np.dtype([("count", "<i4"), ("i0", "<i4"), ("i1", "<i4"), ("i2", "<i4")])
    faces = np.zeros(n, dtype=fdtype)
    faces["count"] = 3
    idx = np.arange(3 * n, dtype=np.int32).reshape(n, 3)
    faces["i0"], faces["i1"], faces["i2"] = idx[:, 0], idx[:, 1], idx[:, 2]
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
        f.write(faces.tobytes())
    return path


def import_ply(path, sigma: float = 0.05) -> TriangleSoup:
    """Read a soup PLY written by export_mesh back into a solid soup."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = n_face = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            parts = line.decode("ascii", "replace").split()
            if parts[:2] == ["format", "binary_little_endian"]:
                pass
            elif parts[:2] == ["element", "vertex"]:
                n_vertex = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                n_face = int(parts[2])
            elif parts == ["end_header"]:
                break
        if n_vertex is None or n_face is None or n_vertex != 3 * n_face:
            raise ValueError(f"{path}: not an unshared triangle-soup PLY")
        vdtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                           ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        verts = np.frombuffer(f.read(n_vertex * vdtype.itemsize), dtype=vdtype)
        fdtype = np.dtype([("count", "<i4"), ("i0", "<i4"), ("i1", "<i4"), ("i2", "<i4")])
        faces = np.frombuffer(f.read(n_face * fdtype.itemsize), dtype=fdtype)
    if not (faces["count"] == 3).all():
        raise ValueError(f"{path}: non-triangle face found")
    pos = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    idx = np.stack([faces["i0"], faces["i1"], faces["i2"]], axis=1)
    vertices = pos[idx]
    rgb = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1)
    face_rgb = rgb[idx[:, 0]].astype(np.float64) / 255.0
    sh = np.zeros((n_face, 16, 3))
    sh[:, 0, :] = (face_rgb - 0.5) / C0
    return TriangleSoup(vertices=vertices, opacity=np.ones(n_face),
                        sigma=np.full(n_face, sigma), sh=sh, solid=True)


def _export_obj(soup: TriangleSoup, path: Path) -> Path:
    n = len(soup)
    mtl_path = path.with_suffix(".mtl")
    colors = soup_colors(soup)
    with open(mtl_path, "w", encoding="utf-8") as f:
        for i in range(n):
            f.write(f"newmtl tri{i}\n")
            f.write(f"Kd {colors[i, 0]:.6f} {colors[i, 1]:.6f} {colors[i, 2]:.6f}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"mtllib {mtl_path.name}\n")
        for v in soup.vertices.reshape(3 * n, 3):
            f.write(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for i in range(n):
            f.write(f"usemtl tri{i}\n")
            f.write(f"f {3 * i + 1} {3 * i + 2} {3 * i + 3}\n")
    return path


def save_render(image, path) -> Path:
    """Write an image as 8-bit PNG (values clamped and rounded half up)."""
    rgb = np.asarray(getattr(image, "rgb", image), dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("image must be HxWx3")
    path = Path(path)
    Image.fromarray(_quantize(rgb), mode="RGB").save(path)
    return path


def save_model(path, soup: TriangleSoup, scene: SfmScene | None = None):
    """Persist a soup (and optionally the scene's cameras) as .npz."""
    soup = as_soup(soup)
    data = {"vertices": soup.vertices, "opacity": soup.opacity,
            "sigma": soup.sigma, "sh": soup.sh,
            "solid": np.array(soup.solid)}
    if scene is not None:
        cam_ids = sorted(scene.cameras)
        data["camera_ids"] = np.array(cam_ids)
        data["camera_params"] = np.array(
            [[scene.cameras[i].fx, scene.cameras[i].fy, scene.cameras[i].cx,
              scene.cameras[i].cy, scene.cameras[i].width,
              scene.cameras[i].height] for i in cam_ids])
        data["view_names"] = np.array([v.name for v in scene.views])
        data["view_camera"] = np.array([v.camera_id for v in scene.views])
        data["view_split"] = np.array([v.split for v in scene.views])
        data["view_rotation"] = np.stack([v.pose.rotation for v in scene.views])
        data["view_translation"] = np.stack([v.pose.translation for v in scene.views])
    np.savez(path, **data)


def load_model(path):
    """Load a .npz model.  Returns (soup, views) where views is a list of
    (name, intrinsics, pose, split) or None if no cameras were saved."""
    with np.load(path, allow_pickle=False) as data:
        soup = TriangleSoup(vertices=data["vertices"], opacity=data["opacity"],
                            sigma=data["sigma"], sh=data["sh"],
                            solid=bool(data["solid"]))
        if "view_names" not in data:
            return soup, None
        cams = {}
        for cam_id, p in zip(data["camera_ids"], data["camera_params"]):
            cams[int(cam_id)] = CameraIntrinsics(fx=p[0], fy=p[1], cx=p[2],
                                                 cy=p[3], width=int(p[4]),
                                                 height=int(p[5]))
        views = []
        for i, name in enumerate(data["view_names"]):
            pose = CameraPose(rotation=data["view_rotation"][i],
                              translation=data["view_translation"][i])
            views.append((str(name), cams[int(data["view_camera"][i])], pose,
                          str(data["view_split"][i])))
        return soup, views
