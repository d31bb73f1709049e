"""Structure-of-arrays storage for a triangle soup.

The renderer and trainer operate on these flat arrays; ``Triangle3D`` is
the single-primitive view used by the geometry API and tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Triangle3D

PARAMS_PER_TRIANGLE = 59  # 9 vertex coords + opacity + sigma + 48 SH


@dataclass
class TriangleSoup:
    vertices: np.ndarray  # (N,3,3) world meters
    opacity: np.ndarray   # (N,) in (0,1)
    sigma: np.ndarray     # (N,) > 0
    sh: np.ndarray        # (N,16,3)
    solid: bool = False   # annealed for export: opacity treated as 1

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3, 3)
        n = len(self.vertices)
        self.opacity = np.ascontiguousarray(self.opacity, dtype=np.float64).reshape(n)
        self.sigma = np.ascontiguousarray(self.sigma, dtype=np.float64).reshape(n)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64).reshape(n, 16, 3)

    def __len__(self) -> int:
        return len(self.vertices)

    @classmethod
    def empty(cls) -> "TriangleSoup":
        return cls(np.zeros((0, 3, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 16, 3)))

    @classmethod
    def from_triangles(cls, triangles) -> "TriangleSoup":
        tris = list(triangles)
        if not tris:
            return cls.empty()
        return cls(
            vertices=np.stack([t.vertices for t in tris]),
            opacity=np.array([t.opacity for t in tris]),
            sigma=np.array([t.sigma for t in tris]),
            sh=np.stack([t.sh for t in tris]),
        )

    def to_triangles(self) -> list[Triangle3D]:
        return [Triangle3D(vertices=self.vertices[i].copy(),
                           opacity=float(self.opacity[i]),
                           sigma=float(self.sigma[i]),
                           sh=self.sh[i].copy())
                for i in range(len(self))]

    def copy(self) -> "TriangleSoup":
        return TriangleSoup(self.vertices.copy(), self.opacity.copy(),
                            self.sigma.copy(), self.sh.copy(), solid=self.solid)

    def select(self, mask_or_index) -> "TriangleSoup":
        return TriangleSoup(self.vertices[mask_or_index], self.opacity[mask_or_index],
                            self.sigma[mask_or_index], self.sh[mask_or_index],
                            solid=self.solid)

    def validate_finite(self):
        """Raise naming the first offending triangle if any parameter is non-finite."""
        if len(self) == 0:
            return
        for name, arr in (("vertices", self.vertices), ("opacity", self.opacity),
                          ("sigma", self.sigma), ("sh", self.sh)):
            flat = arr.reshape(len(self), -1)
            bad = ~np.isfinite(flat).all(axis=1)
            if bad.any():
                idx = int(np.nonzero(bad)[0][0])
                raise ValueError(f"non-finite {name} in triangle {idx}")


def as_soup(triangles) -> TriangleSoup:
    if isinstance(triangles, TriangleSoup):
        return triangles
    return TriangleSoup.from_triangles(triangles)


def concatenate(soups: list[TriangleSoup]) -> TriangleSoup:
    soups = [s for s in soups if len(s) > 0]
    if not soups:
        return TriangleSoup.empty()
    return TriangleSoup(
        np.concatenate([s.vertices for s in soups]),
        np.concatenate([s.opacity for s in soups]),
        np.concatenate([s.sigma for s in soups]),
        np.concatenate([s.sh for s in soups]),
        solid=soups[0].solid,
    )


def get_param(soup: TriangleSoup, index: int) -> float:
    """Flat parameter access: per triangle [v(9), opacity, sigma, sh(48)]."""
    tri, off = divmod(index, PARAMS_PER_TRIANGLE)
    if off < 9:
        return float(soup.vertices[tri].reshape(9)[off])
    if off == 9:
        return float(soup.opacity[tri])
    if off == 10:
        return float(soup.sigma[tri])
    return float(soup.sh[tri].reshape(48)[off - 11])


def set_param(soup: TriangleSoup, index: int, value: float):
    tri, off = divmod(index, PARAMS_PER_TRIANGLE)
    if off < 9:
        soup.vertices[tri].reshape(9)[off] = value
    elif off == 9:
        soup.opacity[tri] = value
    elif off == 10:
        soup.sigma[tri] = value
    else:
        soup.sh[tri].reshape(48)[off - 11] = value
