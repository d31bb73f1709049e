"""Adam optimization of a triangle soup against posed training images,
including the densification schedule and the final annealing run that
produces solid export-ready triangles."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backward import GradientSet, render_backward
from .config import TrainConfig
from .density import ViewStats, densify_step
from .geometry import CameraIntrinsics, CameraPose, WindowMode
from .losses import (depth_from_fragments, distortion_loss, normal_loss,
                     opacity_loss, photometric_loss, size_loss_batch,
                     total_loss)
from .render import render
from .soup import TriangleSoup, as_soup

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
OPACITY_CLAMP = (1e-4, 1.0 - 1e-4)
SIGMA_CLAMP = (1e-3, 1e3)

_GROUPS = ("vertices", "opacity", "sigma", "sh")


@dataclass
class TrainView:
    """One posed training image."""

    intr: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray  # (H,W,3) in [0,1]
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        expect = (self.intr.height, self.intr.width, 3)
        if self.image.shape != expect:
            raise ValueError(f"view '{self.name}': image shape {self.image.shape} "
                             f"does not match camera {expect}")


@dataclass
class AdamState:
    """First/second moment estimates per parameter group, shared step count."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, soup: TriangleSoup) -> "AdamState":
        n = len(soup)
        shapes = {"vertices": (n, 3, 3), "opacity": (n,), "sigma": (n,),
                  "sh": (n, 16, 3)}
        return cls(m={k: np.zeros(s) for k, s in shapes.items()},
                   v={k: np.zeros(s) for k, s in shapes.items()})

    def remap(self, origin: np.ndarray) -> "AdamState":
        """Re-index moments after a density step; new triangles start at zero.

        ``origin[i]`` is the source index of output triangle i (-1 for none);
        clones and children inherit their parent's moments.
        """
        new = AdamState.zeros(TriangleSoup(
            np.zeros((len(origin), 3, 3)), np.zeros(len(origin)),
            np.zeros(len(origin)), np.zeros((len(origin), 16, 3))))
        new.t = self.t
        src = origin >= 0
        for k in _GROUPS:
            new.m[k][src] = self.m[k][origin[src]]
            new.v[k][src] = self.v[k][origin[src]]
        return new


def adam_step(soup: TriangleSoup, grads: GradientSet, state: AdamState,
              lrs: dict):
    """One in-place Adam update with per-group learning rates.

    Opacity is clamped to (1e-4, 1-1e-4) and sigma to (1e-3, 1e3) after the
    update.  Non-finite gradients raise, naming the offending triangle.
    """
    params = {"vertices": soup.vertices, "opacity": soup.opacity,
              "sigma": soup.sigma, "sh": soup.sh}
    gvals = {"vertices": grads.d_vertices, "opacity": grads.d_opacity,
             "sigma": grads.d_sigma, "sh": grads.d_sh}
    for k in _GROUPS:
        g = gvals[k]
        flat = g.reshape(len(soup), -1) if len(soup) else g.reshape(0, 1)
        bad = ~np.isfinite(flat).all(axis=1)
        if bad.any():
            idx = int(np.nonzero(bad)[0][0])
            raise ValueError(f"non-finite {k} gradient for triangle {idx}")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for k in _GROUPS:
        g = gvals[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        params[k] -= lrs[k] * mhat / (np.sqrt(vhat) + ADAM_EPS)
    np.clip(soup.opacity, *OPACITY_CLAMP, out=soup.opacity)
    np.clip(soup.sigma, *SIGMA_CLAMP, out=soup.sigma)


def _view_schedule(n_views: int, iterations: int, rng: np.random.Generator):
    """Epoch-shuffled view order: every view appears once per epoch."""
    order = []
    while len(order) < iterations:
        order.extend(rng.permutation(n_views).tolist())
    return order[:iterations]


def _train_iteration(soup, view, cfg: TrainConfig, state: AdamState,
                     iteration: int, extra_grads=None, lr_scale: float = 1.0):
    """Render one view, compose all active losses, backprop and step Adam.

    Returns (loss_value, photometric_value, render_output).
    """
    w = cfg.weights
    degree = min(3, iteration // cfg.sh_warmup_interval)
    use_distortion = (w.beta_distortion > 0
                      and iteration >= cfg.distortion_start_iter)
    use_normal = w.beta_normal > 0
    need_frags = use_distortion or use_normal
    out = render(soup, view.intr, view.pose, mode=cfg.window,
                 background=cfg.background, collect_fragments=need_frags,
                 active_sh_degree=degree)

    photo = photometric_loss(out.image.rgb, view.image, w.lambda_dssim)
    opac = opacity_loss(soup.opacity) if w.beta_opacity > 0 else None
    size = size_loss_batch(soup) if w.beta_size > 0 else None
    dist = distortion_loss(out.fragments) if use_distortion else None
    norm = None
    if use_normal:
        h_px, w_px = view.intr.height, view.intr.width
        depth = depth_from_fragments(out.fragments, h_px, w_px)
        norm = normal_loss(soup, out.fragments, depth, view.intr, view.pose)

    loss, gd = total_loss(photo, opac, dist, norm, size, w)

    frag_grads = None
    if "d_frag_weight" in gd:
        d_z = gd.get("d_frag_depth")
        if d_z is None:
            d_z = np.zeros(out.fragments.count())
        frag_grads = (out.fragments.offsets, gd["d_frag_weight"], d_z)
    grads = render_backward(soup, view.intr, view.pose, mode=cfg.window,
                            background=cfg.background, d_image=gd["d_image"],
                            frag_grads=frag_grads, active_sh_degree=degree)
    if "d_opacity" in gd:
        grads.d_opacity += gd["d_opacity"]
    if "d_vertices" in gd:
        grads.d_vertices += gd["d_vertices"]
    if extra_grads is not None:
        extra_grads(soup, grads)

    lrs = {"vertices": cfg.vertex_lr(iteration) * lr_scale,
           "opacity": cfg.opacity_lr, "sigma": cfg.sigma_lr,
           "sh": cfg.feature_lr}
    adam_step(soup, grads, state, lrs)
    l1 = float(np.abs(out.image.rgb - view.image).mean())
    dssim = ((photo[0] - (1.0 - w.lambda_dssim) * l1) / w.lambda_dssim
             if w.lambda_dssim > 0 else 0.0)
    return loss, photo[0], l1, dssim, out


def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


def train(soup, views: list[TrainView], cfg: TrainConfig,
          metrics_path=None, log_every: int = 1, progress=None):
    """Optimize a soup against the training views.

    Runs cfg.iterations Adam steps, one view per step in epoch-shuffled
    order, with density control every cfg.densify.interval iterations.
    Returns (soup, adam_state, metrics) where metrics is a list of dicts
    (also appended to metrics_path as CSV when given).
    """
    soup = as_soup(soup).copy()
    if not views:
        raise ValueError("no training views")
    rng = np.random.default_rng(cfg.seed)
    schedule = _view_schedule(len(views), cfg.iterations, rng)
    state = AdamState.zeros(soup)
    stats = ViewStats.empty(len(soup))
    metrics = []
    writer = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    if writer:
        writer.write("iteration,loss,l1,dssim,psnr,n_triangles\n")
    t_start = time.time()
    try:
        for it in range(cfg.iterations):
            view = views[schedule[it]]
            loss, photo, l1, dssim, out = _train_iteration(soup, view, cfg,
                                                           state, it)
            stats.update(schedule[it], out, cfg.densify.min_pixels)

            if (it + 1) % log_every == 0 or it + 1 == cfg.iterations:
                row = {"iteration": it + 1, "n_triangles": len(soup),
                       "loss": loss, "photometric": photo, "l1": l1,
                       "dssim": dssim,
                       "psnr": _psnr(out.image.rgb, view.image),
                       "elapsed_s": time.time() - t_start}
                metrics.append(row)
                if writer:
                    writer.write(f"{row['iteration']},{row['loss']:.6f},"
                                 f"{row['l1']:.6f},{row['dssim']:.6f},"
                                 f"{row['psnr']:.3f},{row['n_triangles']}\n")
                if progress:
                    progress(row)

            it1 = it + 1
            dcfg = cfg.densify
            if (dcfg.start_iter <= it1 <= dcfg.stop_iter
                    and (it1 - dcfg.start_iter) % dcfg.interval == 0
                    and stats.n_views > 0):
                soup, report = densify_step(soup, stats, it1, dcfg, rng)
                state = state.remap(report["origin"])
                stats = ViewStats.empty(len(soup))
    finally:
        if writer:
            writer.close()
    return soup, state, metrics


def anneal_for_export(soup, views: list[TrainView], cfg: TrainConfig,
                      progress=None):
    """Drive the soup toward solid geometry before mesh export.

    Continues photometric training for cfg.anneal_start iterations with SH
    locked to degree 0 and a linearly ramped penalty pushing opacity to 1
    and sigma to cfg.sigma_solid.  Triangles whose opacity stays below the
    densify prune threshold are dropped, then the result is flagged solid
    (opacity treated as 1 by the renderer and exporter).
    """
    soup = as_soup(soup).copy()
    if not views:
        raise ValueError("no training views")
    rng = np.random.default_rng(cfg.seed + 1)
    n_iters = cfg.anneal_start
    schedule = _view_schedule(len(views), n_iters, rng)
    state = AdamState.zeros(soup)

    import dataclasses
    acfg = dataclasses.replace(cfg, sh_warmup_interval=10 ** 9,
                               distortion_start_iter=10 ** 9)
    acfg.weights = dataclasses.replace(cfg.weights, beta_distortion=0.0,
                                       beta_normal=0.0)

    metrics = []
    for it in range(n_iters):
        ramp = cfg.anneal_weight * (it + 1) / n_iters

        def solid_penalty(s, grads, ramp=ramp):
            grads.d_opacity += ramp * 2.0 * (s.opacity - 1.0)
            grads.d_sigma += ramp * 2.0 * (s.sigma - cfg.sigma_solid)

        view = views[schedule[it]]
        loss, _photo, _l1, _dssim, out = _train_iteration(
            soup, view, acfg, state, it, extra_grads=solid_penalty)
        if (it + 1) % 100 == 0 or it + 1 == n_iters:
            row = {"iteration": it + 1, "loss": loss,
                   "mean_opacity": float(soup.opacity.mean()),
                   "mean_sigma": float(soup.sigma.mean())}
            metrics.append(row)
            if progress:
                progress(row)

    keep = soup.opacity >= cfg.densify.tau_prune
    soup = soup.select(keep)
    soup.opacity[:] = 1.0
    soup.solid = True
    return soup, metrics
