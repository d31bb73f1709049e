"""Adaptive density control: pruning weak triangles and growing the soup
by subdividing large ones and cloning small ones.

Statistics are aggregated per training view between density steps; each
step prunes, then adds exactly ceil(growth_rate * survivors) triangles by
weighted sampling (alternating between inverse-sigma and opacity weights).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DensifyConfig
from .geometry import Triangle3D
from .render import RenderOutput
from .soup import TriangleSoup, as_soup, concatenate


class SampleCriterion(enum.Enum):
    INVERSE_SIGMA = "inverse_sigma"
    OPACITY = "opacity"


@dataclass
class ViewStats:
    """Per-view render statistics aggregated between density steps.

    Re-rendering a view replaces its entry, so each view counts once no
    matter how many times it is visited.
    """

    n_triangles: int
    per_view: dict = field(default_factory=dict)  # view id -> (maxw, covered, area)

    @classmethod
    def empty(cls, n_triangles: int) -> "ViewStats":
        return cls(n_triangles=n_triangles)

    def update(self, view_id, output: RenderOutput, min_pixels: int = 2):
        if len(output.per_triangle_max_weight) != self.n_triangles:
            raise ValueError("render output population does not match stats")
        self.per_view[view_id] = (
            output.per_triangle_max_weight.copy(),
            output.per_triangle_pixel_count >= min_pixels,
            output.per_triangle_area.copy(),
        )

    @property
    def n_views(self) -> int:
        return len(self.per_view)

    def max_weight(self) -> np.ndarray:
        out = np.zeros(self.n_triangles)
        for maxw, _, _ in self.per_view.values():
            np.maximum(out, maxw, out=out)
        return out

    def covering_views(self) -> np.ndarray:
        out = np.zeros(self.n_triangles, dtype=np.int64)
        for _, covered, _ in self.per_view.values():
            out += covered
        return out

    def mean_area(self) -> np.ndarray:
        out = np.zeros(self.n_triangles)
        for _, _, area in self.per_view.values():
            out += area
        return out / max(self.n_views, 1)


def prune(soup: TriangleSoup, stats: ViewStats, cfg: DensifyConfig):
    """Drop triangles that never matter: low peak blend weight across all
    views, coverage of more than min_pixels pixels in too few views, or
    opacity below the dead floor.  Returns (survivors, report)."""
    soup = as_soup(soup)
    if stats.n_triangles != len(soup):
        raise ValueError("stats population does not match soup")
    maxw = stats.max_weight()
    views = stats.covering_views()
    low_weight = maxw < cfg.tau_prune
    few_views = views < cfg.min_views
    dead = soup.opacity < cfg.opacity_dead
    removed = low_weight | few_views | dead
    report = {
        "low_weight": np.nonzero(low_weight)[0].tolist(),
        "few_views": np.nonzero(few_views)[0].tolist(),
        "dead_opacity": np.nonzero(dead)[0].tolist(),
        "n_removed": int(removed.sum()),
        "kept_index": np.nonzero(~removed)[0],
    }
    return soup.select(~removed), report


def sample_weights(soup: TriangleSoup, criterion: SampleCriterion) -> np.ndarray:
    if criterion is SampleCriterion.INVERSE_SIGMA:
        return 1.0 / np.maximum(soup.sigma, 1e-12)
    return np.maximum(soup.opacity, 0.0)


def sample_candidates(soup: TriangleSoup, count: int,
                      criterion: SampleCriterion,
                      rng: np.random.Generator) -> np.ndarray:
    """Weighted sampling without replacement via exponential sort keys.

    Equivalent to sequential weighted draws; a single draw picks index i
    with probability w_i / sum(w).
    """
    n = len(soup)
    count = min(count, n)
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    w = sample_weights(soup, criterion)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        w = np.ones(n)
    keys = rng.exponential(size=n) / np.maximum(w, 1e-300)
    return np.argsort(keys, kind="stable")[:count].astype(np.int64)


def midpoint_subdivide(tri: Triangle3D) -> list[Triangle3D]:
    """Split a triangle into four at its edge midpoints.

    Children inherit opacity, sigma and SH coefficients.  Degenerate
    triangles (near-zero area) are rejected.
    """
    v = tri.vertices
    if np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) < 1e-12:
        raise ValueError("cannot subdivide a degenerate triangle")
    m01 = (v[0] + v[1]) / 2.0
    m12 = (v[1] + v[2]) / 2.0
    m20 = (v[2] + v[0]) / 2.0
    corners = [
        np.stack([v[0], m01, m20]),
        np.stack([m01, v[1], m12]),
        np.stack([m20, m12, v[2]]),
        np.stack([m01, m12, m20]),
    ]
    return [Triangle3D(vertices=c, opacity=tri.opacity, sigma=tri.sigma,
                       sh=tri.sh.copy()) for c in corners]


def clone_with_noise(tri: Triangle3D, rng: np.random.Generator,
                     cfg: DensifyConfig) -> Triangle3D:
    """Copy a triangle, jittering each vertex within the triangle's plane.

    Displacement magnitude is capped at max_noise_factor times the mean
    edge length.  A degenerate triangle has no plane and is copied as is.
    """
    v = tri.vertices
    edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]]
    mean_edge = float(np.mean([np.linalg.norm(e) for e in edges]))
    normal = np.cross(v[1] - v[0], v[2] - v[0])
    norm = np.linalg.norm(normal)
    if norm < 1e-12 or mean_edge == 0.0:
        return Triangle3D(vertices=v.copy(), opacity=tri.opacity,
                          sigma=tri.sigma, sh=tri.sh.copy())
    normal = normal / norm
    b1 = v[1] - v[0]
    b1 = b1 / np.linalg.norm(b1)
    b2 = np.cross(normal, b1)
    new_v = v.copy()
    cap = cfg.max_noise_factor * mean_edge
    for i in range(3):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(0.0, cap)
        new_v[i] += radius * (math.cos(angle) * b1 + math.sin(angle) * b2)
    return Triangle3D(vertices=new_v, opacity=tri.opacity, sigma=tri.sigma,
                      sh=tri.sh.copy())


def step_criterion(iteration: int, cfg: DensifyConfig) -> SampleCriterion:
    """Alternates each density step, starting with inverse sigma."""
    step = (iteration - cfg.start_iter) // cfg.interval
    return SampleCriterion.INVERSE_SIGMA if step % 2 == 0 else SampleCriterion.OPACITY


def densify_step(soup: TriangleSoup, stats: ViewStats, iteration: int,
                 cfg: DensifyConfig, rng: np.random.Generator):
    """One prune-and-grow step.  Returns (new_soup, report).

    The report's ``origin`` array maps each output triangle to its source
    index in the input soup (-1 marks none; children and clones map to
    their parent).  Outside the schedule the soup is returned unchanged.
    """
    soup = as_soup(soup)
    n0 = len(soup)
    identity = np.arange(n0, dtype=np.int64)
    scheduled = (cfg.start_iter <= iteration <= cfg.stop_iter
                 and (iteration - cfg.start_iter) % cfg.interval == 0)
    if not scheduled or n0 == 0:
        return soup, {"scheduled": False, "origin": identity,
                      "n_before": n0, "n_after": n0}

    survivors, prune_report = prune(soup, stats, cfg)
    kept = prune_report["kept_index"]
    alive = len(survivors)
    if alive == 0:
        return survivors, {"scheduled": True, "origin": np.zeros(0, np.int64),
                           "prune": prune_report, "n_before": n0, "n_after": 0,
                           "n_split": 0, "n_clone": 0}

    mean_area = stats.mean_area()[kept]
    criterion = step_criterion(iteration, cfg)
    n_add = math.ceil(cfg.growth_rate * alive)

    parent_removed = np.zeros(alive, dtype=bool)
    children: list[Triangle3D] = []
    child_origin: list[int] = []
    n_split = 0
    n_clone = 0
    remaining = n_add
    while remaining > 0:
        pool = np.nonzero(~parent_removed)[0]
        if len(pool) == 0:
            break
        picked = sample_candidates(survivors.select(pool), remaining,
                                   criterion, rng)
        for local in picked:
            if remaining <= 0:
                break
            idx = int(pool[local])
            tri = Triangle3D(vertices=survivors.vertices[idx].copy(),
                             opacity=float(survivors.opacity[idx]),
                             sigma=float(survivors.sigma[idx]),
                             sh=survivors.sh[idx].copy())
            want_split = mean_area[idx] >= cfg.tau_small and remaining >= 3
            if want_split:
                try:
                    quads = midpoint_subdivide(tri)
                except ValueError:
                    want_split = False
                else:
                    parent_removed[idx] = True
                    children.extend(quads)
                    child_origin.extend([int(kept[idx])] * 4)
                    n_split += 1
                    remaining -= 3
            if not want_split:
                children.append(clone_with_noise(tri, rng, cfg))
                child_origin.append(int(kept[idx]))
                n_clone += 1
                remaining -= 1

    keep_mask = ~parent_removed
    base = survivors.select(keep_mask)
    new_soup = concatenate([base, TriangleSoup.from_triangles(children)])
    origin = np.concatenate([kept[keep_mask],
                             np.asarray(child_origin, dtype=np.int64)])
    report = {
        "scheduled": True,
        "prune": prune_report,
        "criterion": criterion,
        "n_before": n0,
        "n_after": len(new_soup),
        "n_add": n_add,
        "n_split": n_split,
        "n_clone": n_clone,
        "origin": origin,
    }
    return new_soup, report
