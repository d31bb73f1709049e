"""Tile-based forward rasterizer with front-to-back alpha compositing.

Triangles are projected and depth-sorted once per view, assigned to 16 px
tiles via their tight bounding boxes, and composited per pixel in global
depth order.  Tiles own disjoint pixel regions, so the tile loop is
parallel; per-triangle statistics are accumulated per tile entry and
reduced afterwards, which keeps the result independent of thread count.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import _kernels
from .geometry import (DEFAULT_TAU_CUTOFF, DEGENERATE_AREA,
                       DEGENERATE_INRADIUS, CameraIntrinsics, CameraPose,
                       ProjectedTriangle, WindowMode, shrink_factor,
                       tight_bbox)
from .sh import sh_basis
from .soup import TriangleSoup, as_soup

DEFAULT_TILE_SIZE = 16
TAU_CONTRIB = 1.0 / 255.0  # blend-weight floor for "covers a pixel"

_threads_configured = False


def _configure_threads():
    global _threads_configured
    if _threads_configured:
        return
    cap = os.environ.get("TRISPLAT_THREADS")
    if cap:
        try:
            n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
            numba.set_num_threads(n)
        except ValueError:
            pass
    _threads_configured = True


@dataclass
class ImageBuffer:
    """H x W x 3 image with values in [0,1]."""

    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("image must be HxWx3")
        if not np.isfinite(self.rgb).all():
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class FragmentData:
    """Per-pixel fragment lists in CSR layout, in compositing order.

    Pixel (x, y) owns fragments offsets[y*W+x] : offsets[y*W+x+1].
    """

    offsets: np.ndarray    # (H*W+1,) int64
    triangle: np.ndarray   # (F,) source triangle ids
    weight: np.ndarray     # (F,) blend weight T*alpha
    depth: np.ndarray      # (F,) camera-space z

    def count(self) -> int:
        return len(self.triangle)


@dataclass
class RenderOutput:
    image: ImageBuffer
    alpha_map: np.ndarray                 # (H,W) accumulated opacity
    per_triangle_max_weight: np.ndarray   # (N,) max over pixels of T*alpha
    per_triangle_pixel_count: np.ndarray  # (N,) pixels with weight > TAU_CONTRIB
    per_triangle_area: np.ndarray         # (N,) projected screen area, px^2 (0 if culled)
    fragments: FragmentData | None = None


@dataclass
class TileGrid:
    """Per-tile triangle lists; each list preserves global depth order."""

    tile_size: int
    n_tiles_x: int
    n_tiles_y: int
    tiles: list  # list of list[(source_index, sort_depth)]


def depth_sort(projected: list[ProjectedTriangle]) -> list[ProjectedTriangle]:
    """Ascending sort_depth, ties broken by source_index (deterministic)."""
    return sorted(projected, key=lambda p: (p.sort_depth, p.source_index))


def assign_tiles(projected: list[ProjectedTriangle], opacities, sigmas,
                 intr: CameraIntrinsics, tau_cutoff: float = DEFAULT_TAU_CUTOFF,
                 tile_size: int = DEFAULT_TILE_SIZE) -> TileGrid:
    """Assign depth-sorted projected triangles to pixel tiles.

    A triangle lands in every tile its tight bounding box intersects;
    opacities/sigmas are indexed by each triangle's source_index.
    """
    ntx = (intr.width + tile_size - 1) // tile_size
    nty = (intr.height + tile_size - 1) // tile_size
    tiles: list[list] = [[] for _ in range(ntx * nty)]
    for proj in projected:
        i = proj.source_index
        rect = tight_bbox(proj, float(opacities[i]), float(sigmas[i]),
                          tau_cutoff, width=intr.width, height=intr.height)
        if rect.empty:
            continue
        tx0, tx1 = rect.x0 // tile_size, (rect.x1 - 1) // tile_size + 1
        ty0, ty1 = rect.y0 // tile_size, (rect.y1 - 1) // tile_size + 1
        for ty in range(ty0, ty1):
            for tx in range(tx0, tx1):
                tiles[ty * ntx + tx].append((i, proj.sort_depth))
    return TileGrid(tile_size=tile_size, n_tiles_x=ntx, n_tiles_y=nty, tiles=tiles)


@dataclass
class SceneProjection:
    """Depth-sorted screen-space data for the accepted triangles of one view."""

    n_total: int
    sorted_idx: np.ndarray  # (M,) source indices, depth order
    z: np.ndarray           # (M,) sort depth
    xc: np.ndarray          # (M,3,3) camera-space vertices
    q: np.ndarray           # (M,3,2)
    nrm: np.ndarray         # (M,3,2)
    doff: np.ndarray        # (M,3)
    esign: np.ndarray       # (M,3)
    phis: np.ndarray        # (M,)
    area: np.ndarray        # (M,)
    sig: np.ndarray
    opa: np.ndarray
    rgb: np.ndarray         # (M,3) clamped
    raw_rgb: np.ndarray     # (M,3) pre-clamp
    basis: np.ndarray       # (M,16)
    viewdir: np.ndarray     # (M,3) unit
    u_norm: np.ndarray      # (M,)
    bbox: np.ndarray        # (M,4) int64: x0,x1,y0,y1
    area_full: np.ndarray   # (N,) projected area for every source triangle


@njit(parallel=True, cache=True)
def _project_kernel(v, r, t, fx, fy, cx, cy, z_near, xc, q, z, area, phis,
                    valid_z):
    n = v.shape[0]
    for i in prange(n):
        z_ok = True
        for k in range(3):
            for a in range(3):
                xc[i, k, a] = (v[i, k, 0] * r[a, 0] + v[i, k, 1] * r[a, 1]
                               + v[i, k, 2] * r[a, 2] + t[a])
            if xc[i, k, 2] < 1e-12:
                z_ok = False
        z[i] = (xc[i, 0, 2] + xc[i, 1, 2] + xc[i, 2, 2]) / 3.0
        if z[i] < z_near:
            z_ok = False
        valid_z[i] = 1 if z_ok else 0
        for k in range(3):
            q[i, k, 0] = fx * xc[i, k, 0] / xc[i, k, 2] + cx
            q[i, k, 1] = fy * xc[i, k, 1] / xc[i, k, 2] + cy
        e1x = q[i, 1, 0] - q[i, 0, 0]
        e1y = q[i, 1, 1] - q[i, 0, 1]
        e2x = q[i, 2, 0] - q[i, 0, 0]
        e2y = q[i, 2, 1] - q[i, 0, 1]
        area[i] = abs(e1x * e2y - e1y * e2x) / 2.0
        perim = 0.0
        for e in range(3):
            j = (e + 1) % 3
            k = (e + 2) % 3
            dx = q[i, j, 0] - q[i, k, 0]
            dy = q[i, j, 1] - q[i, k, 1]
            perim += np.sqrt(dx * dx + dy * dy)
        phis[i] = -2.0 * area[i] / max(perim, 1e-300)


@njit(parallel=True, cache=True)
def _edge_bbox_kernel(q, phis, opa, sig, mode, tau, width, height,
                      nrm, doff, esign, bbox):
    m = q.shape[0]
    for i in prange(m):
        ccx = (q[i, 0, 0] + q[i, 1, 0] + q[i, 2, 0]) / 3.0
        ccy = (q[i, 0, 1] + q[i, 1, 1] + q[i, 2, 1]) / 3.0
        for e in range(3):
            ax = q[i, e, 0]
            ay = q[i, e, 1]
            bx = q[i, (e + 1) % 3, 0]
            by = q[i, (e + 1) % 3, 1]
            evx = bx - ax
            evy = by - ay
            ell = np.sqrt(evx * evx + evy * evy)
            nx = evy / ell
            ny = -evx / ell
            s = -1.0 if nx * (ccx - ax) + ny * (ccy - ay) > 0 else 1.0
            nrm[i, e, 0] = s * nx
            nrm[i, e, 1] = s * ny
            doff[i, e] = -(s * nx * ax + s * ny * ay)
            esign[i, e] = s
        # side lengths opposite each vertex, for the incenter
        s0 = np.sqrt((q[i, 1, 0] - q[i, 2, 0]) ** 2 + (q[i, 1, 1] - q[i, 2, 1]) ** 2)
        s1 = np.sqrt((q[i, 2, 0] - q[i, 0, 0]) ** 2 + (q[i, 2, 1] - q[i, 0, 1]) ** 2)
        s2 = np.sqrt((q[i, 0, 0] - q[i, 1, 0]) ** 2 + (q[i, 0, 1] - q[i, 1, 1]) ** 2)
        perim = s0 + s1 + s2
        sx = (s0 * q[i, 0, 0] + s1 * q[i, 1, 0] + s2 * q[i, 2, 0]) / perim
        sy = (s0 * q[i, 0, 1] + s1 * q[i, 1, 1] + s2 * q[i, 2, 1]) / perim
        if mode == 0:
            f = 1.0 - (tau / opa[i]) ** (1.0 / sig[i]) if opa[i] > tau else 0.0
        else:
            ratio = tau / opa[i]
            f = (1.0 - sig[i] * np.log(ratio / (1.0 - ratio)) / abs(phis[i])
                 if ratio < 1.0 else 0.0)
        bbox[i, 0] = 0
        bbox[i, 1] = 0
        bbox[i, 2] = 0
        bbox[i, 3] = 0
        if f <= 0.0:
            continue
        xmin = ymin = 1e300
        xmax = ymax = -1e300
        for k in range(3):
            px = sx + (q[i, k, 0] - sx) * f
            py = sy + (q[i, k, 1] - sy) * f
            xmin = min(xmin, px)
            xmax = max(xmax, px)
            ymin = min(ymin, py)
            ymax = max(ymax, py)
        x0 = min(max(np.int64(np.floor(xmin - 0.5)), 0), width)
        x1 = min(max(np.int64(np.floor(xmax - 0.5)) + 1, 0), width)
        y0 = min(max(np.int64(np.floor(ymin - 0.5)), 0), height)
        y1 = min(max(np.int64(np.floor(ymax - 0.5)) + 1, 0), height)
        bbox[i, 0] = x0
        bbox[i, 1] = max(x1, x0)
        bbox[i, 2] = y0
        bbox[i, 3] = max(y1, y0)


def project_scene(soup: TriangleSoup, intr: CameraIntrinsics, pose: CameraPose,
                  mode: WindowMode = WindowMode.NORMALIZED,
                  tau_cutoff: float = DEFAULT_TAU_CUTOFF,
                  active_sh_degree: int = 3) -> SceneProjection:
    _configure_threads()
    n = len(soup)
    r = np.ascontiguousarray(pose.rotation)
    t = np.ascontiguousarray(pose.translation)
    v = soup.vertices
    opacity = np.ones(n) if soup.solid else soup.opacity
    xc = np.empty((n, 3, 3))
    q = np.empty((n, 3, 2))
    z = np.empty(n)
    area = np.empty(n)
    phis = np.empty(n)
    valid_z = np.empty(n, dtype=np.uint8)
    _project_kernel(v, r, t, intr.fx, intr.fy, intr.cx, intr.cy, intr.z_near,
                    xc, q, z, area, phis, valid_z)
    valid = valid_z.astype(bool)
    area_full = np.where(valid, area, 0.0)
    valid &= (area >= DEGENERATE_AREA) & (np.abs(phis) >= DEGENERATE_INRADIUS)

    idx = np.nonzero(valid)[0]
    order = np.lexsort((idx, z[idx]))
    sidx = idx[order]
    m = len(sidx)

    q_s = np.ascontiguousarray(q[sidx])
    opa_s = np.ascontiguousarray(opacity[sidx])
    sig_s = np.ascontiguousarray(soup.sigma[sidx])
    phis_s = np.ascontiguousarray(phis[sidx])
    nrm = np.empty((m, 3, 2))
    doff = np.empty((m, 3))
    esign = np.empty((m, 3))
    bbox = np.zeros((m, 4), dtype=np.int64)
    mode_flag = 0 if mode is WindowMode.NORMALIZED else 1
    _edge_bbox_kernel(q_s, phis_s, opa_s, sig_s, mode_flag, tau_cutoff,
                      intr.width, intr.height, nrm, doff, esign, bbox)

    # view-dependent color from camera center to world centroid
    cc = pose.camera_center()
    centroid_w = v[sidx].mean(axis=1)
    u = centroid_w - cc
    u_norm = np.linalg.norm(u, axis=1)
    u_norm = np.maximum(u_norm, 1e-12)
    viewdir = u / u_norm[:, None]
    basis = sh_basis(viewdir)
    ncoef = (active_sh_degree + 1) ** 2
    raw_rgb = np.einsum("mc,mcr->mr", basis[:, :ncoef], soup.sh[sidx, :ncoef]) + 0.5
    rgb = np.clip(raw_rgb, 0.0, 1.0)

    return SceneProjection(
        n_total=n, sorted_idx=sidx, z=np.ascontiguousarray(z[sidx]),
        xc=np.ascontiguousarray(xc[sidx]), q=q_s, nrm=nrm, doff=doff,
        esign=esign, phis=phis_s,
        area=np.ascontiguousarray(area[sidx]),
        sig=sig_s, opa=opa_s,
        rgb=np.ascontiguousarray(rgb), raw_rgb=raw_rgb,
        basis=np.ascontiguousarray(basis), viewdir=viewdir, u_norm=u_norm,
        bbox=bbox, area_full=area_full)


@njit(cache=True)
def _tile_counts(bbox, tile_size, ntx, nty, counts):
    m = bbox.shape[0]
    for i in range(m):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        tx0 = x0 // tile_size
        tx1 = (x1 - 1) // tile_size + 1
        ty0 = y0 // tile_size
        ty1 = (y1 - 1) // tile_size + 1
        for ty in range(ty0, ty1):
            for tx in range(tx0, tx1):
                counts[ty * ntx + tx] += 1


@njit(cache=True)
def _tile_fill(bbox, tile_size, ntx, nty, start, cursor, entry_tri):
    m = bbox.shape[0]
    for i in range(m):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        tx0 = x0 // tile_size
        tx1 = (x1 - 1) // tile_size + 1
        ty0 = y0 // tile_size
        ty1 = (y1 - 1) // tile_size + 1
        for ty in range(ty0, ty1):
            for tx in range(tx0, tx1):
                tile = ty * ntx + tx
                entry_tri[start[tile] + cursor[tile]] = i
                cursor[tile] += 1


def build_tile_lists(proj: SceneProjection, intr: CameraIntrinsics,
                     tile_size: int = DEFAULT_TILE_SIZE):
    """CSR tile lists (tile_start, entry_tri) over sorted triangle indices."""
    ntx = (intr.width + tile_size - 1) // tile_size
    nty = (intr.height + tile_size - 1) // tile_size
    counts = np.zeros(ntx * nty, dtype=np.int64)
    _tile_counts(proj.bbox, tile_size, ntx, nty, counts)
    start = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    entry_tri = np.empty(start[-1], dtype=np.int64)
    cursor = np.zeros(ntx * nty, dtype=np.int64)
    _tile_fill(proj.bbox, tile_size, ntx, nty, start, cursor, entry_tri)
    return ntx, nty, start, entry_tri


def render(triangles, intr: CameraIntrinsics, pose: CameraPose,
           mode: WindowMode = WindowMode.NORMALIZED,
           background=(0.0, 0.0, 0.0), collect_fragments: bool = False,
           tau_cutoff: float = DEFAULT_TAU_CUTOFF,
           tile_size: int = DEFAULT_TILE_SIZE,
           active_sh_degree: int = 3) -> RenderOutput:
    """Rasterize a triangle soup into an image plus pruning statistics."""
    _configure_threads()
    soup = as_soup(triangles)
    soup.validate_finite()
    h, w = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    proj = project_scene(soup, intr, pose, mode, tau_cutoff, active_sh_degree)
    ntx, nty, tile_start, entry_tri = build_tile_lists(proj, intr, tile_size)
    n_tiles = ntx * nty
    mode_flag = (_kernels.MODE_NORMALIZED if mode is WindowMode.NORMALIZED
                 else _kernels.MODE_SIGMOID)

    if collect_fragments:
        frag_count = np.zeros((h, w), dtype=np.int64)
        _kernels.count_fragments(h, w, tile_size, ntx, n_tiles, tile_start,
                                 entry_tri, proj.nrm, proj.doff, proj.phis,
                                 proj.sig, proj.opa, proj.bbox, mode_flag,
                                 frag_count)
        frag_off = np.zeros(h * w + 1, dtype=np.int64)
        np.cumsum(frag_count.reshape(-1), out=frag_off[1:])
        nfrag = int(frag_off[-1])
        frag_m = np.empty(nfrag, dtype=np.int64)
        frag_w = np.empty(nfrag)
        collect = 1
    else:
        frag_off = np.zeros(1, dtype=np.int64)
        frag_m = np.empty(0, dtype=np.int64)
        frag_w = np.empty(0)
        collect = 0

    image = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    ent_maxw = np.zeros(len(entry_tri))
    ent_pix = np.zeros(len(entry_tri), dtype=np.int64)
    _kernels.rasterize_forward(h, w, tile_size, ntx, n_tiles, tile_start,
                               entry_tri, proj.nrm, proj.doff, proj.phis,
                               proj.sig, proj.opa, proj.rgb, proj.bbox,
                               proj.z, mode_flag, bg, TAU_CONTRIB, collect,
                               frag_off, image, alpha_map, ent_maxw, ent_pix,
                               frag_m, frag_w)

    n = len(soup)
    maxw = np.zeros(n)
    pix = np.zeros(n, dtype=np.int64)
    if len(entry_tri):
        src = proj.sorted_idx[entry_tri]
        np.maximum.at(maxw, src, ent_maxw)
        np.add.at(pix, src, ent_pix)

    fragments = None
    if collect_fragments:
        fragments = FragmentData(offsets=frag_off,
                                 triangle=proj.sorted_idx[frag_m],
                                 weight=frag_w,
                                 depth=proj.z[frag_m])

    return RenderOutput(image=ImageBuffer(np.clip(image, 0.0, 1.0)),
                        alpha_map=alpha_map,
                        per_triangle_max_weight=maxw,
                        per_triangle_pixel_count=pix,
                        per_triangle_area=proj.area_full,
                        fragments=fragments)
