"""Real spherical-harmonic color evaluation, degree <= 3.

Coefficients are stored band-major: index l*l + (l + m) for band l and
order m, 16 coefficients per color channel.  The rendered color is
clamp(sum_lm coeff_lm * Y_lm(dir) + 0.5, 0, 1), so all-zero coefficients
give mid-gray.
"""
from __future__ import annotations

import numpy as np

N_COEFFS = 16
MAX_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def active_coeff_count(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0,{MAX_DEGREE}]")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 basis functions at unit directions (..., 3) -> (..., 16)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (N_COEFFS,), dtype=np.float64)
    out[..., 0] = C0
    out[..., 1] = -C1 * y
    out[..., 2] = C1 * z
    out[..., 3] = -C1 * x
    xx, yy, zz = x * x, y * y, z * z
    out[..., 4] = C2[0] * x * y
    out[..., 5] = C2[1] * y * z
    out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = C2[3] * x * z
    out[..., 8] = C2[4] * (xx - yy)
    out[..., 9] = C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = C3[1] * x * y * z
    out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = C3[5] * z * (xx - yy)
    out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(x,y,z) at unit directions: (..., 3) -> (..., 16, 3).

    Partial derivatives of the basis polynomials in the ambient
    coordinates; callers normalizing a non-unit vector must chain through
    the normalization Jacobian themselves.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g = np.zeros(dirs.shape[:-1] + (N_COEFFS, 3), dtype=np.float64)
    zero = np.zeros_like(x)
    g[..., 1, 1] = -C1
    g[..., 2, 2] = C1
    g[..., 3, 0] = -C1
    g[..., 4, 0] = C2[0] * y
    g[..., 4, 1] = C2[0] * x
    g[..., 5, 1] = C2[1] * z
    g[..., 5, 2] = C2[1] * y
    g[..., 6, 0] = C2[2] * (-2.0 * x)
    g[..., 6, 1] = C2[2] * (-2.0 * y)
    g[..., 6, 2] = C2[2] * 4.0 * z
    g[..., 7, 0] = C2[3] * z
    g[..., 7, 2] = C2[3] * x
    g[..., 8, 0] = C2[4] * 2.0 * x
    g[..., 8, 1] = C2[4] * (-2.0 * y)
    g[..., 9, 0] = C3[0] * 6.0 * x * y
    g[..., 9, 1] = C3[0] * (3.0 * x * x - 3.0 * y * y)
    g[..., 10, 0] = C3[1] * y * z
    g[..., 10, 1] = C3[1] * x * z
    g[..., 10, 2] = C3[1] * x * y
    g[..., 11, 0] = C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
    g[..., 11, 2] = C3[2] * 8.0 * y * z
    g[..., 12, 0] = C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
    g[..., 13, 0] = C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
    g[..., 13, 1] = C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = C3[4] * 8.0 * x * z
    g[..., 14, 0] = C3[5] * 2.0 * x * z
    g[..., 14, 1] = C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = C3[5] * (x * x - y * y)
    g[..., 15, 0] = C3[6] * (3.0 * x * x - 3.0 * y * y)
    g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    g[..., 0, 0] = zero  # keep shape/broadcast explicit for degree 0
    return g


def eval_color(coeffs: np.ndarray, view_dir: np.ndarray,
               active_degree: int = MAX_DEGREE) -> np.ndarray:
    """View-dependent RGB in [0,1] from a (16,3) coefficient block."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(N_COEFFS, 3)
    d = np.asarray(view_dir, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(d)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    n = active_coeff_count(active_degree)
    basis = sh_basis(d)[:n]
    raw = basis @ coeffs[:n] + 0.5
    return np.clip(raw, 0.0, 1.0)
