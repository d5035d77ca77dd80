"""Per-gaussian color store: real spherical harmonics up to degree 3.

Colors are evaluated as clamp(basis(dir) . coeffs + 0.5, 0, 1) with dir
the unit vector from the camera center to the gaussian. Degree 0 keeps
appearance view-independent; higher degrees add view-dependent terms and
open a gradient path from color back to the gaussian position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianColorStore:
    coeffs: np.ndarray  # (N, n_coeffs(degree), 3)
    degree: int

    def __post_init__(self):
        if self.degree not in (0, 1, 2, 3):
            raise ValueError(f"unsupported SH degree {self.degree}")
        if self.coeffs.shape[1:] != (n_coeffs(self.degree), 3):
            raise ValueError(
                f"coeff shape {self.coeffs.shape} does not match degree {self.degree}"
            )

    def keep(self, idx: np.ndarray) -> "GaussianColorStore":
        return GaussianColorStore(self.coeffs[idx].copy(), self.degree)


def color_store_from_rgb(rgb: np.ndarray, degree: int = 0, dtype=np.float32) -> GaussianColorStore:
    """DC-only init so that the evaluated color equals rgb exactly."""
    rgb = np.atleast_2d(np.asarray(rgb, dtype=np.float64))
    coeffs = np.zeros((rgb.shape[0], n_coeffs(degree), 3))
    coeffs[:, 0, :] = (rgb - 0.5) / SH_C0
    return GaussianColorStore(np.asarray(coeffs, dtype=dtype), degree)


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values, (N, n_coeffs); dirs must be unit vectors."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], n_coeffs(degree)), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d basis / d dir, (N, n_coeffs, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    g = np.zeros((dirs.shape[0], n_coeffs(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1] = np.stack([zero, -SH_C1 + zero, zero], axis=-1)
        g[:, 2] = np.stack([zero, zero, SH_C1 + zero], axis=-1)
        g[:, 3] = np.stack([-SH_C1 + zero, zero, zero], axis=-1)
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=-1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=-1)
        g[:, 6] = SH_C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=-1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=-1)
        g[:, 8] = SH_C2[4] * np.stack([2.0 * x, -2.0 * y, zero], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = SH_C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, zero], axis=-1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        g[:, 11] = SH_C3[2] * np.stack(
            [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=-1
        )
        g[:, 12] = SH_C3[3] * np.stack(
            [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=-1
        )
        g[:, 13] = SH_C3[4] * np.stack(
            [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=-1
        )
        g[:, 14] = SH_C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=-1)
        g[:, 15] = SH_C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, zero], axis=-1)
    return g


def sh_eval(store: GaussianColorStore, dirs: np.ndarray) -> np.ndarray:
    """Clamped colors (N, 3) for unit view directions (N, 3)."""
    basis = sh_basis(store.degree, dirs)
    raw = np.einsum("nc,ncd->nd", basis, store.coeffs.astype(np.float64)) + 0.5
    return np.clip(raw, 0.0, 1.0)


def sh_eval_vjp(store: GaussianColorStore, dirs: np.ndarray, d_colors: np.ndarray):
    """Gradients (d_coeffs, d_dirs); clamped channels pass zero gradient."""
    basis = sh_basis(store.degree, dirs)
    coeffs = store.coeffs.astype(np.float64)
    raw = np.einsum("nc,ncd->nd", basis, coeffs) + 0.5
    mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    g = np.asarray(d_colors, dtype=np.float64) * mask
    d_coeffs = np.einsum("nc,nd->ncd", basis, g)
    bgrad = sh_basis_grad(store.degree, dirs)
    d_dirs = np.einsum("nck,ncd,nd->nk", bgrad, coeffs, g)
    return d_coeffs, d_dirs
