"""Training loss terms and their weighted combination.

The photometric term blends L1 with structural dissimilarity; the
remaining regularizers act on opacities, fragment depth spread, surface
normal alignment and triangle size.  Every term returns its value together
with analytic gradients so the trainer composes them by linearity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, CameraPose, Triangle3D
from .render import FragmentData, ImageBuffer
from .soup import TriangleSoup, as_soup

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SIZE_FLOOR = 1e-8


@dataclass
class LossWeights:
    """Weights of the combined objective."""

    lambda_dssim: float = 0.2
    beta_opacity: float = 0.0055
    beta_distortion: float = 100.0
    beta_normal: float = 0.0001
    beta_size: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_dssim", "beta_opacity", "beta_distortion",
                     "beta_normal", "beta_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must be in [0,1]")


def _gaussian_1d() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()

_WINDOW_1D = _gaussian_1d()
_HALF = SSIM_WINDOW // 2


def _conv_same(x: np.ndarray) -> np.ndarray:
    # the 2D Gaussian window is separable, so filter each axis in turn
    tmp = ndimage.correlate1d(x, _WINDOW_1D, axis=0, mode="constant")
    return ndimage.correlate1d(tmp, _WINDOW_1D, axis=1, mode="constant")


def _conv_valid(x: np.ndarray) -> np.ndarray:
    return _conv_same(x)[_HALF:-_HALF, _HALF:-_HALF]


def _conv_adjoint(g: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    # window is symmetric, so correlation doubles as the adjoint convolution
    return _conv_same(full)


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    """Mean SSIM of one channel over valid 11x11 windows plus d(mean)/dx."""
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _conv_valid(x)
    mu_y = _conv_valid(y)
    ex2 = _conv_valid(x * x)
    exy = _conv_valid(x * y)
    ey2 = _conv_valid(y * y)
    var_x = ex2 - mu_x ** 2
    var_y = ey2 - mu_y ** 2
    cov = exy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = var_x + var_y + c2
    smap = (a1 * a2) / (b1 * b2)
    npix = smap.size
    # partials of the per-window SSIM w.r.t. its statistics
    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -smap / b1
    d_b2 = -smap / b2
    g_mu = 2.0 * mu_y * d_a1 + 2.0 * mu_x * d_b1 \
        - 2.0 * mu_y * d_a2 - 2.0 * mu_x * d_b2
    g_ex2 = d_b2
    g_exy = 2.0 * d_a2
    scale = 1.0 / npix
    dx = _conv_adjoint(g_mu * scale, x.shape) \
        + 2.0 * x * _conv_adjoint(g_ex2 * scale, x.shape) \
        + y * _conv_adjoint(g_exy * scale, x.shape)
    return float(smap.mean()), dx


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over channels (11x11 Gaussian window, sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("image dimensions differ")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        return 1.0
    return float(np.mean([_ssim_channel(x[..., c], y[..., c])[0]
                          for c in range(x.shape[2])]))


def photometric_loss(rendered, target, lam: float):
    """(1-lambda) * L1 + lambda * (1 - SSIM)/2, with gradient w.r.t. rendered."""
    r = rendered.rgb if isinstance(rendered, ImageBuffer) else np.asarray(rendered, dtype=np.float64)
    t = target.rgb if isinstance(target, ImageBuffer) else np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"image dimensions differ: {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.abs(diff).mean())
    d_l1 = np.sign(diff) / diff.size
    if lam == 0.0:
        return l1, d_l1
    if r.shape[0] < SSIM_WINDOW or r.shape[1] < SSIM_WINDOW:
        ssim_val, d_ssim = 1.0, np.zeros_like(r)
    else:
        vals = []
        d_ssim = np.zeros_like(r)
        for c in range(r.shape[2]):
            v, dx = _ssim_channel(r[..., c], t[..., c])
            vals.append(v)
            d_ssim[..., c] = dx / r.shape[2]
        ssim_val = float(np.mean(vals))
    loss = (1.0 - lam) * l1 + lam * (1.0 - ssim_val) / 2.0
    grad = (1.0 - lam) * d_l1 - (lam / 2.0) * d_ssim
    return loss, grad


def opacity_loss(opacities):
    """Mean opacity with its gradient (1/N each); empty input gives 0."""
    o = np.asarray(opacities, dtype=np.float64).reshape(-1)
    if o.size == 0:
        return 0.0, np.zeros(0)
    return float(o.mean()), np.full(o.size, 1.0 / o.size)


def _distortion_pairwise(off, w, z, scale):
    d_w = np.zeros_like(w)
    d_z = np.zeros_like(z)
    total = 0.0
    for pix in range(len(off) - 1):
        lo, hi = off[pix], off[pix + 1]
        if hi - lo < 2:
            continue
        ws = w[lo:hi]
        zs = z[lo:hi]
        dz = np.abs(zs[:, None] - zs[None, :])
        total += float(ws @ dz @ ws)
        d_w[lo:hi] += 2.0 * dz @ ws
        d_z[lo:hi] += 2.0 * (np.sign(zs[:, None] - zs[None, :]) * ws[None, :]).sum(axis=1) * ws
    return total * scale, d_w * scale, d_z * scale


def distortion_loss(fragments: FragmentData, image_size: int | None = None):
    """Pairwise blend-weighted depth spread, averaged over pixels.

    Per pixel: sum over ordered fragment pairs (i, j) of w_i w_j |z_i - z_j|.
    Returns (value, d_weight, d_depth) aligned with the fragment arrays.
    Fragments already sorted by depth within each pixel take an O(F)
    prefix-sum path; anything else falls back to the pairwise form.
    """
    off = fragments.offsets
    npix = image_size if image_size is not None else len(off) - 1
    w = fragments.weight
    z = fragments.depth
    scale = 1.0 / max(npix, 1)
    nfrag = len(w)
    if nfrag == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    counts = np.diff(off)
    seg = np.repeat(np.arange(len(counts)), counts)
    interior = seg[1:] == seg[:-1]
    if not (z[1:][interior] >= z[:-1][interior]).all():
        return _distortion_pairwise(off, w, z, scale)
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwz = np.concatenate([[0.0], np.cumsum(w * z)])
    start = off[seg]
    w_before = cw[np.arange(nfrag)] - cw[start]
    s_before = cwz[np.arange(nfrag)] - cwz[start]
    tot_w = (cw[off[1:]] - cw[off[:-1]])[seg]
    tot_s = (cwz[off[1:]] - cwz[off[:-1]])[seg]
    w_after = tot_w - w_before - w
    s_after = tot_s - s_before - w * z
    fwd = z * w_before - s_before
    total = 2.0 * float((w * fwd).sum())
    d_w = 2.0 * (fwd + (s_after - z * w_after))
    d_z = 2.0 * w * (w_before - w_after)
    return total * scale, d_w * scale, d_z * scale


def depth_from_fragments(fragments: FragmentData, height: int, width: int) -> np.ndarray:
    """Blend-weight-normalized expected depth per pixel (0 where empty)."""
    d = np.zeros(height * width)
    wsum = np.zeros(height * width)
    off = fragments.offsets
    counts = np.diff(off)
    pix_idx = np.repeat(np.arange(height * width), counts)
    np.add.at(d, pix_idx, fragments.weight * fragments.depth)
    np.add.at(wsum, pix_idx, fragments.weight)
    d = d / np.maximum(wsum, 1e-8)
    return d.reshape(height, width)


def depth_normals(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-space unit normals from a depth map.

    Backprojects the depth map, takes central differences with border
    replication and orients the normals toward the camera (z < 0).
    """
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs + 0.5 - intr.cx) / intr.fx
    py = (ys + 0.5 - intr.cy) / intr.fy
    pts = np.stack([depth * px, depth * py, depth], axis=-1)
    pad = np.pad(pts, ((1, 1), (1, 1), (0, 0)), mode="edge")
    ddx = (pad[1:-1, 2:] - pad[1:-1, :-2]) / 2.0
    ddy = (pad[2:, 1:-1] - pad[:-2, 1:-1]) / 2.0
    n = np.cross(ddx, ddy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = n / np.maximum(norm, 1e-12)
    flip = n[..., 2] > 0
    n[flip] = -n[flip]
    return n


def normal_loss(triangles, fragments: FragmentData, depth: np.ndarray,
                intr: CameraIntrinsics, pose: CameraPose):
    """Blend-weighted misalignment of triangle normals with depth normals.

    Mean over contributing fragments of w * (1 - n . N) with n the
    camera-facing triangle normal and N from the depth map (treated as
    fixed).  Returns (value, d_vertices (N,3,3), d_weight (F,)).
    """
    soup = as_soup(triangles)
    n_tri = len(soup)
    d_vertices = np.zeros((n_tri, 3, 3))
    d_w = np.zeros(fragments.count())
    if fragments.count() == 0:
        return 0.0, d_vertices, d_w
    h, w = depth.shape
    nmap = depth_normals(depth, intr)

    a = soup.vertices[:, 1] - soup.vertices[:, 0]
    b = soup.vertices[:, 2] - soup.vertices[:, 0]
    c = np.cross(a, b)
    cn = np.maximum(np.linalg.norm(c, axis=1), 1e-12)
    chat = c / cn[:, None]
    # camera-facing orientation: flip so the camera-space normal has z < 0
    centroid_cam = soup.vertices.mean(axis=1) @ pose.rotation.T + pose.translation
    n_cam = chat @ pose.rotation.T
    facing = (n_cam * centroid_cam).sum(axis=1)
    flip = np.where(facing > 0, -1.0, 1.0)

    counts = np.diff(fragments.offsets)
    pix_idx = np.repeat(np.arange(h * w), counts)
    nmap_flat = nmap.reshape(-1, 3)
    n_px = nmap_flat[pix_idx]                      # (F,3) camera frame
    m_world = n_px @ pose.rotation                  # rotate into world frame
    tri = fragments.triangle
    dot = (chat[tri] * m_world).sum(axis=1) * flip[tri]
    per_frag = fragments.weight * (1.0 - dot)
    nfrag = fragments.count()
    value = float(per_frag.sum() / nfrag)
    d_w = (1.0 - dot) / nfrag
    # d(value)/d(c) through the unit normal, depth normals held fixed
    coef = -fragments.weight * flip[tri] / nfrag    # (F,)
    g_c = np.zeros((n_tri, 3))
    proj = (m_world - chat[tri] * (chat[tri] * m_world).sum(axis=1)[:, None])
    np.add.at(g_c, tri, coef[:, None] * proj / cn[tri, None])
    # cross-product chain: c = a x b
    da = np.cross(b, g_c)
    db = np.cross(g_c, a)
    d_vertices[:, 1] += da
    d_vertices[:, 2] += db
    d_vertices[:, 0] -= da + db
    return value, d_vertices, d_w


def size_loss(tri: Triangle3D):
    """2 / ||(v1-v0) x (v2-v0)|| with the norm floored at 1e-8.

    Returns (value, d_vertices (3,3)); the gradient is clamped to zero when
    the floor is engaged.
    """
    v = np.asarray(tri.vertices if isinstance(tri, Triangle3D) else tri,
                   dtype=np.float64).reshape(3, 3)
    a = v[1] - v[0]
    b = v[2] - v[0]
    c = np.cross(a, b)
    cn = np.linalg.norm(c)
    d_vertices = np.zeros((3, 3))
    if cn <= SIZE_FLOOR:
        return 2.0 / SIZE_FLOOR, d_vertices
    value = 2.0 / cn
    g_c = -2.0 * c / cn ** 3
    da = np.cross(b, g_c)
    db = np.cross(g_c, a)
    d_vertices[1] = da
    d_vertices[2] = db
    d_vertices[0] = -(da + db)
    return value, d_vertices


def size_loss_batch(soup: TriangleSoup):
    """Mean size loss over a soup plus per-vertex gradients."""
    n = len(soup)
    if n == 0:
        return 0.0, np.zeros((0, 3, 3))
    a = soup.vertices[:, 1] - soup.vertices[:, 0]
    b = soup.vertices[:, 2] - soup.vertices[:, 0]
    c = np.cross(a, b)
    cn = np.linalg.norm(c, axis=1)
    floored = cn <= SIZE_FLOOR
    vals = 2.0 / np.where(floored, SIZE_FLOOR, cn)
    g_c = -2.0 * c / np.where(floored, np.inf, cn)[:, None] ** 3
    g_c[floored] = 0.0
    da = np.cross(b, g_c)
    db = np.cross(g_c, a)
    d_vertices = np.zeros((n, 3, 3))
    d_vertices[:, 1] = da
    d_vertices[:, 2] = db
    d_vertices[:, 0] = -(da + db)
    return float(vals.mean()), d_vertices / n


def total_loss(photometric, opacity, distortion, normal, size,
               weights: LossWeights):
    """Weighted sum of the loss components; gradients compose by linearity.

    Each component is (value, grads...) as returned by the functions above;
    pass None for inactive terms.  Returns (value, dict of weighted grads).
    """
    value = 0.0
    grads: dict = {}
    if photometric is not None:
        v, d_image = photometric
        value += v
        grads["d_image"] = d_image
    if opacity is not None:
        v, d_o = opacity
        value += weights.beta_opacity * v
        grads["d_opacity"] = weights.beta_opacity * d_o
    if distortion is not None:
        v, d_w, d_z = distortion
        value += weights.beta_distortion * v
        grads["d_frag_weight"] = weights.beta_distortion * d_w
        grads["d_frag_depth"] = weights.beta_distortion * d_z
    if normal is not None:
        v, d_v, d_w = normal
        value += weights.beta_normal * v
        grads["d_vertices"] = grads.get("d_vertices", 0) + weights.beta_normal * d_v
        dw = grads.get("d_frag_weight")
        grads["d_frag_weight"] = (weights.beta_normal * d_w if dw is None
                                  else dw + weights.beta_normal * d_w)
    if size is not None:
        v, d_v = size
        value += weights.beta_size * v
        grads["d_vertices"] = grads.get("d_vertices", 0) + weights.beta_size * d_v
    return value, grads
