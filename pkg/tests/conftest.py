"""Shared fixtures and reference implementations used across the suite."""
import math

import numpy as np
import pytest

from trisplat.geometry import CameraIntrinsics, CameraPose, Triangle3D, WindowMode
from trisplat.render import project_scene
from trisplat.soup import TriangleSoup
from trisplat.synthetic import look_at

ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def random_pose(rng) -> CameraPose:
    """Uniformly random rotation plus a translation keeping z positive."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return CameraPose(rotation=r, translation=rng.uniform(-0.5, 0.5, 3))


def random_scene(rng, n_tri=None, width=32, height=24, sigma_range=(0.5, 5.0),
                 opacity_range=(0.1, 0.9)):
    """Random small scene fully in front of a camera looking down +z."""
    if n_tri is None:
        n_tri = int(rng.integers(1, 6))
    intr = CameraIntrinsics(fx=width * 1.3, fy=height * 1.4,
                            cx=width / 2.0 + rng.uniform(-2, 2),
                            cy=height / 2.0 + rng.uniform(-2, 2),
                            width=width, height=height)
    center = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0])
    eye = center + np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                             -rng.uniform(2.0, 3.5)])
    pose = look_at(eye, center)
    verts = rng.uniform(-0.8, 0.8, (n_tri, 3, 3)) * np.array([1.0, 1.0, 0.4])
    soup = TriangleSoup(
        vertices=verts,
        opacity=rng.uniform(*opacity_range, n_tri),
        sigma=rng.uniform(*sigma_range, n_tri),
        sh=rng.normal(0.0, 0.3, (n_tri, 16, 3)),
    )
    return soup, intr, pose


TAU_CONTRIB = 1.0 / 255.0


class NaiveResult:
    """Everything the reference compositor produces for one view."""

    def __init__(self, image, alpha_map, max_weight, pixel_count, fragments):
        self.image = image            # (H,W,3) clipped
        self.alpha_map = alpha_map    # (H,W)
        self.max_weight = max_weight  # (N,)
        self.pixel_count = pixel_count  # (N,)
        self.fragments = fragments    # (H,W) list of (source, weight, depth)


def naive_render(soup, intr, pose, mode=WindowMode.NORMALIZED,
                 background=(0.0, 0.0, 0.0), active_sh_degree=3) -> NaiveResult:
    """Per-pixel all-triangles reference compositor.

    Evaluates every depth-sorted triangle at every pixel with the same
    fragment arithmetic, skip rule, alpha clamp and early exit as the tile
    kernels (no bounding boxes, no tiles).
    """
    proj = project_scene(soup, intr, pose, mode, active_sh_degree=active_sh_degree)
    h, w = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64)
    image = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    max_weight = np.zeros(proj.n_total)
    pixel_count = np.zeros(proj.n_total, dtype=np.int64)
    fragments = [[[] for _ in range(w)] for _ in range(h)]
    m_count = len(proj.sorted_idx)
    for py in range(h):
        pcy = py + 0.5
        for px in range(w):
            pcx = px + 0.5
            t = 1.0
            for m in range(m_count):
                phi = proj.nrm[m, 0, 0] * pcx + proj.nrm[m, 0, 1] * pcy + proj.doff[m, 0]
                v1 = proj.nrm[m, 1, 0] * pcx + proj.nrm[m, 1, 1] * pcy + proj.doff[m, 1]
                if v1 > phi:
                    phi = v1
                v2 = proj.nrm[m, 2, 0] * pcx + proj.nrm[m, 2, 1] * pcy + proj.doff[m, 2]
                if v2 > phi:
                    phi = v2
                if mode is WindowMode.NORMALIZED:
                    if phi >= 0.0:
                        continue
                    r = phi / proj.phis[m]
                    if r > 1.0:
                        r = 1.0
                    window = r ** proj.sig[m]
                else:
                    x = phi / proj.sig[m]
                    if x > 700.0:
                        x = 700.0
                    window = 1.0 / (1.0 + math.exp(x))
                alpha = proj.opa[m] * window
                if alpha > ALPHA_CLAMP:
                    alpha = ALPHA_CLAMP
                if alpha < ALPHA_MIN:
                    continue
                weight = t * alpha
                image[py, px] += weight * proj.rgb[m]
                src = int(proj.sorted_idx[m])
                if weight > max_weight[src]:
                    max_weight[src] = weight
                if weight > TAU_CONTRIB:
                    pixel_count[src] += 1
                fragments[py][px].append((src, weight, float(proj.z[m])))
                t *= 1.0 - alpha
                if t < T_MIN:
                    break
            image[py, px] += t * bg
            alpha_map[py, px] = 1.0 - t
    return NaiveResult(np.clip(image, 0.0, 1.0), alpha_map, max_weight,
                       pixel_count, fragments)


def single_triangle(vertices, opacity=0.5, sigma=1.0, sh=None) -> Triangle3D:
    if sh is None:
        sh = np.zeros((16, 3))
    return Triangle3D(vertices=np.asarray(vertices, dtype=np.float64),
                      opacity=opacity, sigma=sigma, sh=sh)


@pytest.fixture
def frontal_camera():
    """64x64 camera at the origin looking down +z."""
    intr = CameraIntrinsics(fx=80.0, fy=80.0, cx=32.0, cy=32.0,
                            width=64, height=64)
    pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
    return intr, pose
