"""Analytic gradients of the rendered image w.r.t. all triangle parameters,
plus the central finite-difference oracle used to validate them.

Gradients do not flow through depth sorting or tile assignment; the ReLU
subgradient at the boundary is 0, clamped alphas pass no gradient, and
skipped fragments (alpha < 1/255) contribute nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import CameraIntrinsics, CameraPose, WindowMode
from .render import (DEFAULT_TILE_SIZE, SceneProjection, _configure_threads,
                     build_tile_lists, project_scene, render)
from .geometry import DEFAULT_TAU_CUTOFF
from .sh import sh_basis_grad
from .soup import (PARAMS_PER_TRIANGLE, TriangleSoup, as_soup, get_param,
                   set_param)


@dataclass
class GradientSet:
    """Per-triangle gradients mirroring the 59 parameters."""

    d_vertices: np.ndarray  # (N,3,3)
    d_opacity: np.ndarray   # (N,)
    d_sigma: np.ndarray     # (N,)
    d_sh: np.ndarray        # (N,16,3)

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 3, 3)), np.zeros(n), np.zeros(n),
                   np.zeros((n, 16, 3)))

    def param(self, index: int) -> float:
        tri, off = divmod(index, PARAMS_PER_TRIANGLE)
        if off < 9:
            return float(self.d_vertices[tri].reshape(9)[off])
        if off == 9:
            return float(self.d_opacity[tri])
        if off == 10:
            return float(self.d_sigma[tri])
        return float(self.d_sh[tri].reshape(48)[off - 11])

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(self.d_vertices * factor, self.d_opacity * factor,
                           self.d_sigma * factor, self.d_sh * factor)

    def add(self, other: "GradientSet"):
        self.d_vertices += other.d_vertices
        self.d_opacity += other.d_opacity
        self.d_sigma += other.d_sigma
        self.d_sh += other.d_sh


def _phis_q_grad(proj: SceneProjection, gphis: np.ndarray) -> np.ndarray:
    """Chain scalar d/d(phi_s) into d/d(q): phi_s = -2*area/perimeter."""
    q = proj.q
    m = q.shape[0]
    out = np.zeros((m, 3, 2))
    e1 = q[:, 1] - q[:, 0]
    e2 = q[:, 2] - q[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    sgn = np.sign(cross)
    perim = (np.linalg.norm(q[:, 1] - q[:, 2], axis=1)
             + np.linalg.norm(q[:, 2] - q[:, 0], axis=1)
             + np.linalg.norm(q[:, 0] - q[:, 1], axis=1))
    area = np.abs(cross) / 2.0
    # d(cross)/dq_i, cyclic
    dcross = np.empty((m, 3, 2))
    dcross[:, 0, 0] = q[:, 1, 1] - q[:, 2, 1]
    dcross[:, 0, 1] = q[:, 2, 0] - q[:, 1, 0]
    dcross[:, 1, 0] = q[:, 2, 1] - q[:, 0, 1]
    dcross[:, 1, 1] = q[:, 0, 0] - q[:, 2, 0]
    dcross[:, 2, 0] = q[:, 0, 1] - q[:, 1, 1]
    dcross[:, 2, 1] = q[:, 1, 0] - q[:, 0, 0]
    darea = 0.5 * sgn[:, None, None] * dcross
    # d(perimeter)/dq_i
    dperim = np.zeros((m, 3, 2))
    for i in range(3):
        for j in (((i + 1) % 3), ((i + 2) % 3)):
            d = q[:, i] - q[:, j]
            dperim[:, i] += d / np.linalg.norm(d, axis=1)[:, None]
    coef_a = -2.0 / perim
    coef_p = 2.0 * area / perim ** 2
    out = (coef_a[:, None, None] * darea + coef_p[:, None, None] * dperim)
    return gphis[:, None, None] * out


def render_backward(triangles, intr: CameraIntrinsics, pose: CameraPose,
                    mode: WindowMode = WindowMode.NORMALIZED,
                    background=(0.0, 0.0, 0.0), d_image=None,
                    frag_grads=None, tau_cutoff: float = DEFAULT_TAU_CUTOFF,
                    tile_size: int = DEFAULT_TILE_SIZE,
                    active_sh_degree: int = 3) -> GradientSet:
    """Gradients of sum(d_image * image) w.r.t. every triangle parameter.

    ``frag_grads`` optionally adds upstream gradients on the fragments of a
    paired collect_fragments render: (offsets, d_weight, d_depth) in the
    same CSR layout; a layout mismatch with this scene/camera is an error.
    """
    _configure_threads()
    soup = as_soup(triangles)
    soup.validate_finite()
    h, w = intr.height, intr.width
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise ValueError(f"d_image must be {(h, w, 3)}, got {d_image.shape}")
    if not np.isfinite(d_image).all():
        raise ValueError("d_image contains non-finite values")
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    proj = project_scene(soup, intr, pose, mode, tau_cutoff, active_sh_degree)
    ntx, nty, tile_start, entry_tri = build_tile_lists(proj, intr, tile_size)
    n_tiles = ntx * nty
    mode_flag = (_kernels.MODE_NORMALIZED if mode is WindowMode.NORMALIZED
                 else _kernels.MODE_SIGMOID)

    if frag_grads is not None:
        frag_off, fg_dw, fg_dz = frag_grads
        frag_off = np.ascontiguousarray(frag_off, dtype=np.int64)
        fg_dw = np.ascontiguousarray(fg_dw, dtype=np.float64)
        fg_dz = np.ascontiguousarray(fg_dz, dtype=np.float64)
        count = np.zeros((h, w), dtype=np.int64)
        _kernels.count_fragments(h, w, tile_size, ntx, n_tiles, tile_start,
                                 entry_tri, proj.nrm, proj.doff, proj.phis,
                                 proj.sig, proj.opa, proj.bbox, mode_flag,
                                 count)
        expect = np.zeros(h * w + 1, dtype=np.int64)
        np.cumsum(count.reshape(-1), out=expect[1:])
        if frag_off.shape != expect.shape or not np.array_equal(frag_off, expect) \
                or len(fg_dw) != expect[-1] or len(fg_dz) != expect[-1]:
            raise ValueError("fragment gradients do not match this scene/camera")
        has_fg = 1
    else:
        frag_off = np.zeros(1, dtype=np.int64)
        fg_dw = np.empty(0)
        fg_dz = np.empty(0)
        has_fg = 0

    n_ent = len(entry_tri)
    gq_e = np.zeros((n_ent, 3, 2))
    go_e = np.zeros(n_ent)
    gsig_e = np.zeros(n_ent)
    grgb_e = np.zeros((n_ent, 3))
    gphis_e = np.zeros(n_ent)
    gz_e = np.zeros(n_ent)
    _kernels.rasterize_backward(h, w, tile_size, ntx, n_tiles, tile_start,
                                entry_tri, proj.q, proj.nrm, proj.doff,
                                proj.esign, proj.phis, proj.sig, proj.opa,
                                proj.rgb, proj.bbox, mode_flag, bg, d_image,
                                has_fg, frag_off, fg_dw, fg_dz,
                                gq_e, go_e, gsig_e, grgb_e, gphis_e, gz_e)

    m = len(proj.sorted_idx)
    gq = np.zeros((m, 3, 2))
    go = np.zeros(m)
    gsig = np.zeros(m)
    grgb = np.zeros((m, 3))
    gphis = np.zeros(m)
    gz = np.zeros(m)
    if n_ent:
        np.add.at(gq, entry_tri, gq_e)
        np.add.at(go, entry_tri, go_e)
        np.add.at(gsig, entry_tri, gsig_e)
        np.add.at(grgb, entry_tri, grgb_e)
        np.add.at(gphis, entry_tri, gphis_e)
        np.add.at(gz, entry_tri, gz_e)

    if mode is WindowMode.NORMALIZED and m:
        gq += _phis_q_grad(proj, gphis)

    grads = GradientSet.zeros(len(soup))
    if m == 0:
        return grads

    # screen-space q -> camera-space vertices via the projection Jacobian
    xc = proj.xc
    zc = xc[:, :, 2]
    d_xc = np.zeros((m, 3, 3))
    d_xc[:, :, 0] = intr.fx * gq[:, :, 0] / zc
    d_xc[:, :, 1] = intr.fy * gq[:, :, 1] / zc
    d_xc[:, :, 2] = (-intr.fx * xc[:, :, 0] * gq[:, :, 0]
                     - intr.fy * xc[:, :, 1] * gq[:, :, 1]) / zc ** 2
    # sort-depth path (fragment depth gradients): z = mean of vertex z
    d_xc[:, :, 2] += gz[:, None] / 3.0
    d_v = d_xc @ pose.rotation  # chain through x_cam = R v + t

    # color path: clamp mask, then SH coefficients and the view direction
    active = (proj.raw_rgb > 0.0) & (proj.raw_rgb < 1.0)
    d_raw = grgb * active
    ncoef = (active_sh_degree + 1) ** 2
    d_sh = np.zeros((m, 16, 3))
    d_sh[:, :ncoef, :] = proj.basis[:, :ncoef, None] * d_raw[:, None, :]
    gb = sh_basis_grad(proj.viewdir)[:, :ncoef, :]  # (m,ncoef,3)
    # d/d(dir) of sum_ch d_raw_ch * (basis . sh_ch)
    d_dir = np.einsum("mr,mcr,mcd->md", d_raw, np.ascontiguousarray(
        as_soup(triangles).sh[proj.sorted_idx, :ncoef]), gb)
    # normalization Jacobian: dir = u/|u|
    d_u = (d_dir - proj.viewdir * (proj.viewdir * d_dir).sum(axis=1)[:, None]) \
        / proj.u_norm[:, None]
    d_v += d_u[:, None, :] / 3.0  # world-space centroid, 1/3 per vertex

    np.add.at(grads.d_vertices, proj.sorted_idx, d_v)
    np.add.at(grads.d_opacity, proj.sorted_idx, go)
    np.add.at(grads.d_sigma, proj.sorted_idx, gsig)
    np.add.at(grads.d_sh, proj.sorted_idx, d_sh)
    return grads


def finite_difference_oracle(triangles, intr: CameraIntrinsics,
                             pose: CameraPose, d_image, param_index: int,
                             h: float, mode: WindowMode = WindowMode.NORMALIZED,
                             background=(0.0, 0.0, 0.0),
                             active_sh_degree: int = 3) -> float:
    """Central difference of f(x) = sum(d_image * rendered image)."""
    soup = as_soup(triangles)
    d_image = np.asarray(d_image, dtype=np.float64)

    def f(value):
        probe = soup.copy()
        set_param(probe, param_index, value)
        out = render(probe, intr, pose, mode=mode, background=background,
                     active_sh_degree=active_sh_degree)
        return float(np.sum(d_image * out.image.rgb))

    x = get_param(soup, param_index)
    return (f(x + h) - f(x - h)) / (2.0 * h)


def fragment_signature(triangles, intr: CameraIntrinsics, pose: CameraPose,
                       mode: WindowMode = WindowMode.NORMALIZED,
                       active_sh_degree: int = 3):
    """Discrete compositing state of a view, for finite-difference exclusion.

    Captures, per pixel, the fragment id sequence plus each fragment's
    clamp flag and window argmax edge, and the per-triangle color clamp
    mask.  Two parameter values whose signatures differ straddle a
    nondifferentiable event (fragment skip, alpha clamp, SDF edge tie,
    color saturation, culling) and are excluded from gradient checks.
    """
    soup = as_soup(triangles)
    out = render(soup, intr, pose, mode=mode, collect_fragments=True,
                 active_sh_degree=active_sh_degree)
    frags = out.fragments
    proj = project_scene(soup, intr, pose, mode, DEFAULT_TAU_CUTOFF,
                         active_sh_degree)
    pos = {int(s): i for i, s in enumerate(proj.sorted_idx)}
    h, w = intr.height, intr.width
    clamp_flags = np.zeros(frags.count(), dtype=np.uint8)
    argmax_edges = np.zeros(frags.count(), dtype=np.int8)
    for pix in range(h * w):
        lo, hi = frags.offsets[pix], frags.offsets[pix + 1]
        if lo == hi:
            continue
        py, px = divmod(pix, w)
        pcx, pcy = px + 0.5, py + 0.5
        t = 1.0
        for k in range(lo, hi):
            mi = pos[int(frags.triangle[k])]
            vals = proj.nrm[mi, :, 0] * pcx + proj.nrm[mi, :, 1] * pcy + proj.doff[mi]
            argmax_edges[k] = int(np.argmax(vals))
            alpha = frags.weight[k] / t
            if alpha > _kernels.ALPHA_CLAMP - 1e-12:
                clamp_flags[k] = 1
            t *= 1.0 - alpha
    color_clamped = ((proj.raw_rgb <= 0.0) | (proj.raw_rgb >= 1.0))
    return (frags.offsets.copy(), frags.triangle.copy(), clamp_flags,
            argmax_edges, proj.sorted_idx.copy(), color_clamped)


def signatures_equal(a, b) -> bool:
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(triangles, intr: CameraIntrinsics, pose: CameraPose,
                    d_image, rng: np.random.Generator,
                    mode: WindowMode = WindowMode.NORMALIZED,
                    background=(0.0, 0.0, 0.0), n_params: int | None = None,
                    h: float = 1e-5, active_sh_degree: int = 3):
    """Compare analytic and finite-difference gradients on sampled parameters.

    Returns (max_relative_error, n_checked, n_excluded).  Parameters whose
    perturbation flips a discrete compositing state are excluded.
    """
    soup = as_soup(triangles)
    grads = render_backward(soup, intr, pose, mode=mode, background=background,
                            d_image=d_image, active_sh_degree=active_sh_degree)
    total = len(soup) * PARAMS_PER_TRIANGLE
    if n_params is None or n_params >= total:
        indices = np.arange(total)
    else:
        indices = rng.choice(total, size=n_params, replace=False)
    max_rel = 0.0
    checked = 0
    excluded = 0
    for idx in indices:
        idx = int(idx)
        x = get_param(soup, idx)
        for probe_h, keep in ((h, True),):
            plus = soup.copy()
            set_param(plus, idx, x + probe_h)
            minus = soup.copy()
            set_param(minus, idx, x - probe_h)
            sig_p = fragment_signature(plus, intr, pose, mode, active_sh_degree)
            sig_m = fragment_signature(minus, intr, pose, mode, active_sh_degree)
            if not signatures_equal(sig_p, sig_m):
                excluded += 1
                continue
            fd = finite_difference_oracle(soup, intr, pose, d_image, idx,
                                          probe_h, mode=mode,
                                          background=background,
                                          active_sh_degree=active_sh_degree)
            an = grads.param(idx)
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            max_rel = max(max_rel, rel)
            checked += 1
    return max_rel, checked, excluded
