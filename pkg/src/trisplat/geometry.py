"""Pinhole projection and per-triangle screen-space math.

Everything here is a pure function of its inputs; the dataclasses are
immutable after construction and safe to share across threads.  Pixel
coordinates are continuous: pixel index (ix, iy) covers the unit square
whose center is (ix + 0.5, iy + 0.5).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

# Projected triangles below these thresholds are culled: the normalized
# window function divides by phi(s), which vanishes with the inradius.
DEGENERATE_AREA = 1e-8       # px^2
DEGENERATE_INRADIUS = 1e-6   # px

# Influence below 1/255 is under the quantization step of 8-bit output.
DEFAULT_TAU_CUTOFF = 1.0 / 255.0


class WindowMode(Enum):
    """Screen-space opacity profile of a triangle."""

    NORMALIZED = "normalized"   # ReLU(phi(p)/phi(s))^sigma, support == triangle
    SIGMOID = "sigmoid"         # sigmoid(-phi(p)/sigma), unbounded support


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = 0.01

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not self.z_near > 0:
            raise ValueError("z_near must be positive")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray     # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class Triangle3D:
    """One soup primitive: 3 world vertices, opacity, smoothness, SH color.

    59 scalar parameters: 9 vertex coordinates, opacity, sigma, and a
    16x3 block of spherical-harmonic color coefficients (degree <= 3).
    """

    vertices: np.ndarray  # (3,3) world meters
    opacity: float
    sigma: float
    sh: np.ndarray        # (16,3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(3, 3)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(16, 3)
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must be in (0,1), got {self.opacity}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class ProjectedTriangle:
    """Screen-space triangle with its edge lines and incenter.

    Edge i runs from vertex i to vertex (i+1) % 3.  ``normals`` are unit
    outward normals, so L_i(p) = normals[i] . p + offsets[i] is negative
    inside.  ``edge_sign`` records the +-1 orientation factor applied to
    the raw edge normal (needed by the analytic backward pass).
    """

    q: np.ndarray          # (3,2) pixels
    normals: np.ndarray    # (3,2) unit, outward
    offsets: np.ndarray    # (3,)
    edge_sign: np.ndarray  # (3,) in {-1,+1}
    incenter: np.ndarray   # (2,)
    phi_s: float           # signed distance at incenter, < 0 (= -inradius)
    sort_depth: float      # camera-space z of the 3D centroid
    source_index: int = 0


@dataclass(frozen=True)
class PixelRect:
    """Half-open pixel-index rectangle [x0,x1) x [y0,y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0

    def area(self) -> int:
        return 0 if self.empty else (self.x1 - self.x0) * (self.y1 - self.y0)


def _edge_setup(q: np.ndarray):
    """Outward unit edge lines of a screen triangle.

    Returns (normals, offsets, signs) with L_i(p) = n_i . p + d_i < 0 inside.
    """
    normals = np.empty((3, 2))
    offsets = np.empty(3)
    signs = np.empty(3)
    c = q.mean(axis=0)
    for i in range(3):
        a = q[i]
        b = q[(i + 1) % 3]
        e = b - a
        ell = math.hypot(e[0], e[1])
        n = np.array([e[1], -e[0]]) / ell
        s = 1.0
        if n @ c + (-(n @ a)) > 0.0:
            n = -n
            s = -1.0
        normals[i] = n
        offsets[i] = -(n @ a)
        signs[i] = s
    return normals, offsets, signs


def incenter_of(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Incenter and incenter SDF value (-inradius) of a screen triangle.

    Uses the side-length barycentric closed form; the inradius is
    2*area/perimeter.
    """
    a = np.linalg.norm(q[1] - q[2])  # opposite q0
    b = np.linalg.norm(q[2] - q[0])  # opposite q1
    c = np.linalg.norm(q[0] - q[1])  # opposite q2
    perim = a + b + c
    area2 = abs(_cross2(q[1] - q[0], q[2] - q[0]))
    if area2 / 2.0 < DEGENERATE_AREA or perim <= 0:
        raise ValueError("degenerate triangle has no incenter")
    s = (a * q[0] + b * q[1] + c * q[2]) / perim
    phi_s = -area2 / perim  # = -(2*area)/perimeter = -inradius
    return s, phi_s


def _cross2(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def project_triangle(tri: Triangle3D, intr: CameraIntrinsics,
                     pose: CameraPose) -> ProjectedTriangle | None:
    """Project a triangle to screen space; ``None`` means culled.

    Culls when the camera-space z of the 3D centroid is below z_near, when
    any vertex sits essentially on the camera plane, or when the projected
    triangle is degenerate (area < 1e-8 px^2 or inradius < 1e-6 px).
    """
    v = np.asarray(tri.vertices, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("non-finite vertex coordinates")
    xc = v @ pose.rotation.T + pose.translation
    sort_depth = float(xc[:, 2].mean())
    if sort_depth < intr.z_near:
        return None
    if np.any(xc[:, 2] < 1e-12):
        return None
    q = np.empty((3, 2))
    q[:, 0] = intr.fx * xc[:, 0] / xc[:, 2] + intr.cx
    q[:, 1] = intr.fy * xc[:, 1] / xc[:, 2] + intr.cy
    area = abs(_cross2(q[1] - q[0], q[2] - q[0])) / 2.0
    if area < DEGENERATE_AREA:
        return None
    s, phi_s = incenter_of(q)
    if abs(phi_s) < DEGENERATE_INRADIUS:
        return None
    normals, offsets, signs = _edge_setup(q)
    # re-evaluate phi_s through the edge lines so the normalized ratio is
    # exactly 1.0 at the incenter (the closed form rounds differently)
    phi_s = float(np.max(normals @ s + offsets))
    return ProjectedTriangle(q=q, normals=normals, offsets=offsets,
                             edge_sign=signs, incenter=s, phi_s=phi_s,
                             sort_depth=sort_depth)


def signed_distance(proj: ProjectedTriangle, p) -> float:
    """SDF of the projected triangle: max of the three edge lines."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.max(proj.normals @ p + proj.offsets))


def incenter(proj: ProjectedTriangle) -> tuple[np.ndarray, float]:
    """Incenter point and its SDF value for a projected triangle."""
    return incenter_of(proj.q)


def window_value(proj: ProjectedTriangle, p, sigma: float,
                 mode: WindowMode = WindowMode.NORMALIZED) -> float:
    """Per-pixel influence in [0,1].

    NORMALIZED: ReLU(phi(p)/phi(s))^sigma -- exactly 1 at the incenter,
    exactly 0 on and outside the boundary.  SIGMOID: the baseline
    sigmoid(-phi(p)/sigma), whose support exceeds the triangle.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    phi = signed_distance(proj, p)
    if mode is WindowMode.SIGMOID:
        return float(1.0 / (1.0 + math.exp(min(phi / sigma, 700.0))))
    ratio = phi / proj.phi_s
    if ratio <= 0.0:
        return 0.0
    return float(min(ratio, 1.0) ** sigma)


def shrink_factor(opacity: float, sigma: float, tau_cutoff: float) -> float:
    """Fraction of the triangle (scaled about the incenter) that can still
    contribute at least tau_cutoff: 1 - (tau/o)^(1/sigma).  <= 0 means no
    pixel reaches the cutoff."""
    if opacity <= tau_cutoff:
        return 0.0
    return 1.0 - (tau_cutoff / opacity) ** (1.0 / sigma)


def pixel_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Half-open pixel-index range whose centers may fall in [lo, hi]."""
    i0 = int(math.floor(lo - 0.5))
    i1 = int(math.floor(hi - 0.5)) + 1
    return max(0, i0), min(limit, max(i1, 0))


def tight_bbox(proj: ProjectedTriangle, opacity: float, sigma: float,
               tau_cutoff: float = DEFAULT_TAU_CUTOFF,
               width: int | None = None, height: int | None = None) -> PixelRect:
    """Pixel rectangle outside of which o * I(p) < tau_cutoff (normalized mode).

    Each edge is shrunk inward by d = |phi_s| * (tau/o)^(1/sigma); because
    all three edges move by the same distance, the shrunk triangle is the
    original scaled about the incenter by 1 - d/|phi_s|.  The result is the
    axis-aligned bound of that shrunk triangle, clipped to the image, and is
    always a subset of the naive vertex bounding box.
    """
    if not 0.0 < tau_cutoff < 1.0:
        raise ValueError("tau_cutoff must be in (0,1)")
    if not 0.0 < opacity <= 1.0:
        raise ValueError("opacity must be in (0,1]")
    w = width if width is not None else 1 << 30
    h = height if height is not None else 1 << 30
    f = shrink_factor(opacity, sigma, tau_cutoff)
    if f <= 0.0:
        return PixelRect(0, 0, 0, 0)
    pts = proj.incenter + (proj.q - proj.incenter) * f
    x0, x1 = pixel_span(float(pts[:, 0].min()), float(pts[:, 0].max()), w)
    y0, y1 = pixel_span(float(pts[:, 1].min()), float(pts[:, 1].max()), h)
    if x1 <= x0 or y1 <= y0:
        return PixelRect(0, 0, 0, 0)
    return PixelRect(x0, y0, x1, y1)
