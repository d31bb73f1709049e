"""Numba kernels for the tile rasterizer and its analytic backward pass.

Arrays indexed by ``m`` refer to depth-sorted accepted triangles; arrays
indexed by ``e`` refer to tile entries (one per triangle-tile overlap, so
tile-parallel accumulation is race-free).  Pixel centers sit at
(ix + 0.5, iy + 0.5).  Compositing skips fragments with alpha < 1/255,
clamps alpha at 0.99 and stops once transmittance drops below 1e-4; the
same rules are applied identically in every kernel so fragment sequences
agree between the forward, counting, collecting and backward passes.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

MODE_NORMALIZED = 0
MODE_SIGMOID = 1


@njit(cache=True, inline="always")
def _fragment_alpha(pcx, pcy, m, nrm, doff, phis, sig, opa, mode):
    """Evaluate one triangle at one pixel center.

    Returns (alpha_unclamped, ratio, phi, argmax_edge); alpha <= 0 means
    the pixel is outside the window support.
    """
    phi = nrm[m, 0, 0] * pcx + nrm[m, 0, 1] * pcy + doff[m, 0]
    edge = 0
    v1 = nrm[m, 1, 0] * pcx + nrm[m, 1, 1] * pcy + doff[m, 1]
    if v1 > phi:
        phi = v1
        edge = 1
    v2 = nrm[m, 2, 0] * pcx + nrm[m, 2, 1] * pcy + doff[m, 2]
    if v2 > phi:
        phi = v2
        edge = 2
    if mode == MODE_NORMALIZED:
        if phi >= 0.0:
            return 0.0, 0.0, phi, edge
        r = phi / phis[m]
        if r > 1.0:
            r = 1.0
        window = r ** sig[m]
    else:
        x = phi / sig[m]
        if x > 700.0:
            x = 700.0
        window = 1.0 / (1.0 + math.exp(x))
        r = window  # unused in sigmoid chain; keep defined
    return opa[m] * window, r, phi, edge


@njit(cache=True, parallel=True)
def rasterize_forward(height, width, tile_size, n_tiles_x, n_tiles,
                      tile_start, entry_tri,
                      nrm, doff, phis, sig, opa, rgb, bbox, zdepth, mode,
                      background, tau_contrib, collect, frag_off,
                      image, alpha_map, ent_maxw, ent_pix,
                      frag_m, frag_w):
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        tw = x_hi - x_lo
        th = y_hi - y_lo
        trans = np.ones((th, tw))
        done = np.zeros((th, tw), dtype=np.uint8)
        cursor = np.zeros((th, tw), dtype=np.int64)
        if collect != 0:
            for yy in range(th):
                for xx in range(tw):
                    cursor[yy, xx] = frag_off[(y_lo + yy) * width + (x_lo + xx)]
        active = th * tw
        for e in range(tile_start[t], tile_start[t + 1]):
            if active == 0:
                break
            m = entry_tri[e]
            bx0 = max(bbox[m, 0], x_lo)
            bx1 = min(bbox[m, 1], x_hi)
            by0 = max(bbox[m, 2], y_lo)
            by1 = min(bbox[m, 3], y_hi)
            for py in range(by0, by1):
                yy = py - y_lo
                pcy = py + 0.5
                for px in range(bx0, bx1):
                    xx = px - x_lo
                    if done[yy, xx] != 0:
                        continue
                    pcx = px + 0.5
                    alpha, r, phi, edge = _fragment_alpha(
                        pcx, pcy, m, nrm, doff, phis, sig, opa, mode)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_MIN:
                        continue
                    tcur = trans[yy, xx]
                    w = tcur * alpha
                    image[py, px, 0] += w * rgb[m, 0]
                    image[py, px, 1] += w * rgb[m, 1]
                    image[py, px, 2] += w * rgb[m, 2]
                    if w > ent_maxw[e]:
                        ent_maxw[e] = w
                    if w > tau_contrib:
                        ent_pix[e] += 1
                    if collect != 0:
                        idx = cursor[yy, xx]
                        frag_m[idx] = m
                        frag_w[idx] = w
                        cursor[yy, xx] = idx + 1
                    tnew = tcur * (1.0 - alpha)
                    trans[yy, xx] = tnew
                    if tnew < T_MIN:
                        done[yy, xx] = 1
                        active -= 1
        for yy in range(th):
            for xx in range(tw):
                tf = trans[yy, xx]
                py = y_lo + yy
                px = x_lo + xx
                image[py, px, 0] += tf * background[0]
                image[py, px, 1] += tf * background[1]
                image[py, px, 2] += tf * background[2]
                alpha_map[py, px] = 1.0 - tf


@njit(cache=True, parallel=True)
def count_fragments(height, width, tile_size, n_tiles_x, n_tiles,
                    tile_start, entry_tri,
                    nrm, doff, phis, sig, opa, bbox, mode, frag_count):
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        tw = x_hi - x_lo
        th = y_hi - y_lo
        trans = np.ones((th, tw))
        done = np.zeros((th, tw), dtype=np.uint8)
        active = th * tw
        for e in range(tile_start[t], tile_start[t + 1]):
            if active == 0:
                break
            m = entry_tri[e]
            bx0 = max(bbox[m, 0], x_lo)
            bx1 = min(bbox[m, 1], x_hi)
            by0 = max(bbox[m, 2], y_lo)
            by1 = min(bbox[m, 3], y_hi)
            for py in range(by0, by1):
                yy = py - y_lo
                pcy = py + 0.5
                for px in range(bx0, bx1):
                    xx = px - x_lo
                    if done[yy, xx] != 0:
                        continue
                    pcx = px + 0.5
                    alpha, r, phi, edge = _fragment_alpha(
                        pcx, pcy, m, nrm, doff, phis, sig, opa, mode)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_MIN:
                        continue
                    frag_count[py, px] += 1
                    tnew = trans[yy, xx] * (1.0 - alpha)
                    trans[yy, xx] = tnew
                    if tnew < T_MIN:
                        done[yy, xx] = 1
                        active -= 1


@njit(cache=True, parallel=True)
def rasterize_backward(height, width, tile_size, n_tiles_x, n_tiles,
                       tile_start, entry_tri,
                       q2d, nrm, doff, esign, phis, sig, opa, rgb, bbox,
                       mode, background, d_image,
                       has_fg, frag_off, fg_dw, fg_dz,
                       gq, go, gsig, grgb, gphis, gz):
    """Per-entry gradients of sum(d_image * rendered image) plus optional
    per-fragment upstream gradients w.r.t. blend weights and depths.

    Clamped fragments (alpha at 0.99) pass no gradient to opacity or the
    window; skipped fragments contribute nothing.  phi(s) gradients are
    accumulated as scalars and chained to vertices by the caller.
    """
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        n_ent = tile_start[t + 1] - tile_start[t]
        if n_ent == 0:
            continue
        rb_e = np.empty(n_ent, dtype=np.int64)
        rb_alpha = np.empty(n_ent)
        rb_r = np.empty(n_ent)
        rb_phi = np.empty(n_ent)
        rb_T = np.empty(n_ent)
        rb_edge = np.empty(n_ent, dtype=np.int64)
        rb_clamp = np.empty(n_ent, dtype=np.uint8)
        for py in range(y_lo, y_hi):
            pcy = py + 0.5
            for px in range(x_lo, x_hi):
                pcx = px + 0.5
                # forward replay for this pixel
                nfrag = 0
                tcur = 1.0
                for e in range(tile_start[t], tile_start[t + 1]):
                    m = entry_tri[e]
                    if px < bbox[m, 0] or px >= bbox[m, 1]:
                        continue
                    if py < bbox[m, 2] or py >= bbox[m, 3]:
                        continue
                    alpha, r, phi, edge = _fragment_alpha(
                        pcx, pcy, m, nrm, doff, phis, sig, opa, mode)
                    clamped = np.uint8(0)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                        clamped = np.uint8(1)
                    if alpha < ALPHA_MIN:
                        continue
                    rb_e[nfrag] = e
                    rb_alpha[nfrag] = alpha
                    rb_r[nfrag] = r
                    rb_phi[nfrag] = phi
                    rb_T[nfrag] = tcur
                    rb_edge[nfrag] = edge
                    rb_clamp[nfrag] = clamped
                    nfrag += 1
                    tcur *= 1.0 - alpha
                    if tcur < T_MIN:
                        break
                if nfrag == 0:
                    continue
                d0 = d_image[py, px, 0]
                d1 = d_image[py, px, 1]
                d2 = d_image[py, px, 2]
                base = frag_off[py * width + px] if has_fg != 0 else 0
                # suffix color: remaining contribution behind fragment k
                s0 = tcur * background[0]
                s1 = tcur * background[1]
                s2 = tcur * background[2]
                sw = 0.0
                for k in range(nfrag - 1, -1, -1):
                    e = rb_e[k]
                    m = entry_tri[e]
                    alpha = rb_alpha[k]
                    tb = rb_T[k]
                    w = tb * alpha
                    grgb[e, 0] += w * d0
                    grgb[e, 1] += w * d1
                    grgb[e, 2] += w * d2
                    one_m = 1.0 - alpha
                    g_alpha = (d0 * (tb * rgb[m, 0] - s0 / one_m)
                               + d1 * (tb * rgb[m, 1] - s1 / one_m)
                               + d2 * (tb * rgb[m, 2] - s2 / one_m))
                    if has_fg != 0:
                        u = fg_dw[base + k]
                        g_alpha += u * tb - sw / one_m
                        sw += u * w
                        gz[e] += fg_dz[base + k]
                    s0 += w * rgb[m, 0]
                    s1 += w * rgb[m, 1]
                    s2 += w * rgb[m, 2]
                    if rb_clamp[k] != 0:
                        continue
                    go[e] += g_alpha * (rb_alpha[k] / opa[m])
                    g_win = opa[m] * g_alpha
                    phi = rb_phi[k]
                    if mode == MODE_NORMALIZED:
                        r = rb_r[k]
                        window = r ** sig[m]
                        gsig[e] += g_win * window * math.log(r)
                        g_r = g_win * sig[m] * r ** (sig[m] - 1.0)
                        if r >= 1.0:
                            # ratio clamped at the incenter; subgradient 0
                            g_phi = 0.0
                        else:
                            g_phi = g_r / phis[m]
                            gphis[e] += -g_r * phi / (phis[m] * phis[m])
                    else:
                        window = rb_r[k]
                        gsig[e] += g_win * window * (1.0 - window) * phi / (sig[m] * sig[m])
                        g_phi = -g_win * window * (1.0 - window) / sig[m]
                    # chain through the argmax edge line L = s*(u/ell)
                    ed = rb_edge[k]
                    ia = ed
                    ib = (ed + 1) % 3
                    ax = q2d[m, ia, 0]
                    ay = q2d[m, ia, 1]
                    bx = q2d[m, ib, 0]
                    by = q2d[m, ib, 1]
                    ex = bx - ax
                    ey = by - ay
                    ell = math.sqrt(ex * ex + ey * ey)
                    s = esign[m, ed]
                    inv_l = 1.0 / ell
                    inv_l2 = inv_l * inv_l
                    # dL/da, dL/db at pixel p (see edge-line derivation)
                    gax = s * (pcy - by) * inv_l - phi * (ax - bx) * inv_l2
                    gay = s * (bx - pcx) * inv_l - phi * (ay - by) * inv_l2
                    gbx = s * (ay - pcy) * inv_l - phi * (bx - ax) * inv_l2
                    gby = s * (pcx - ax) * inv_l - phi * (by - ay) * inv_l2
                    gq[e, ia, 0] += g_phi * gax
                    gq[e, ia, 1] += g_phi * gay
                    gq[e, ib, 0] += g_phi * gbx
                    gq[e, ib, 1] += g_phi * gby
