"""Software tile-based splatting of 3D gaussians with analytic backward.

Forward pipeline per frame: build 3D covariances from (rotation, scale),
project means and covariances to screen space (first-order Jacobian
propagation plus a 0.3 px^2 low-pass diagonal floor), depth-sort globally
with stable index tie-breaking, bin into tiles by 3-sigma bounding
rectangles, then alpha-blend front to back per pixel. Blending stops once
transmittance drops below 1e-4 and splats below alpha' = 1/255 are
skipped; both rules are part of the render definition, mirrored exactly
by the brute-force oracle in the tests.

The backward pass replays the blend per pixel and applies the chain rule
through every step above, treating the depth order and the binning as
piecewise constant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _kernels
from .rotations import (
    normalize_quat,
    normalize_quat_vjp,
    quat_to_matrix,
    quat_to_matrix_vjp,
)
from .sh import GaussianColorStore, sh_eval, sh_eval_vjp

COV2D_FLOOR = 0.3
CUTOFF_SIGMA = 3.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,) so that x_cam = R x_world + t
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near plane must be closer than far plane")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.array(d["rotation"], dtype=np.float64),
            translation=np.array(d["translation"], dtype=np.float64),
            near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)),
        )


def look_at_camera(position, target, fx, fy, width, height,
                   up=(0.0, 0.0, 1.0), near=0.01, far=100.0) -> Camera:
    """Camera at `position` looking at `target`, x right / y down / z forward."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
        rotation=rotation, translation=-rotation @ position,
        near=near, far=far,
    )


@dataclass
class PosedGaussianSet:
    positions: np.ndarray   # (N, 3) world space
    rotations: np.ndarray   # (N, 4) unit quaternions
    scales: np.ndarray      # (N, 3) positive
    opacities: np.ndarray   # (N,) in (0, 1); float saturation at 1 tolerated
    colors: GaussianColorStore
    part_labels: np.ndarray | None = None
    degenerate: np.ndarray | None = None  # per-gaussian warp failure flags

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.rotations.shape != (n, 4):
            raise ValueError("positions/rotations shape mismatch")
        if self.scales.shape != (n, 3) or self.opacities.shape != (n,):
            raise ValueError("scales/opacities shape mismatch")
        if self.colors.coeffs.shape[0] != n:
            raise ValueError("color store count mismatch")
        if n and np.max(np.abs(np.linalg.norm(self.rotations, axis=-1) - 1.0)) > 1e-3:
            raise ValueError("rotations must be unit quaternions")
        if n and (np.min(self.scales) <= 0.0 or np.min(self.opacities) < 0.0
                  or np.max(self.opacities) > 1.0):
            raise ValueError("scales must be positive, opacities within [0, 1]")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class RenderedImage:
    rgb: np.ndarray            # (H, W, 3) float64 in [0, 1]
    transmittance: np.ndarray  # (H, W) float64
    contrib_count: np.ndarray  # (H, W) int32


def covariance_3d(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for one gaussian."""
    return covariance_3d_batch(np.asarray(rotation)[None, :], np.asarray(scale)[None, :])[0]


def covariance_3d_batch(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    r = quat_to_matrix(normalize_quat(np.asarray(rotations, dtype=np.float64)))
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", r, s2, r)


def project_gaussian(position: np.ndarray, cov3d: np.ndarray, cam: Camera):
    """Project one gaussian: (mean2d, cov2d, depth, culled)."""
    out = project_batch(np.asarray(position)[None, :], np.asarray(cov3d)[None, :, :], cam)
    return out["means2d"][0], out["cov2d"][0], float(out["depths"][0]), bool(out["culled"][0])


def project_batch(positions: np.ndarray, cov3d: np.ndarray, cam: Camera) -> dict:
    """Vectorized projection; culled = outside [near, far]."""
    xc = positions @ cam.rotation.T + cam.translation
    depths = xc[:, 2]
    culled = (depths < cam.near) | (depths > cam.far)
    z = np.where(np.abs(depths) < 1e-12, 1e-12, depths)
    means2d = np.stack(
        [cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy], axis=1
    )
    n = positions.shape[0]
    jac = np.zeros((n, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * xc[:, 0] / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * xc[:, 1] / z**2
    v = jac @ cam.rotation
    cov2d = v @ cov3d @ np.swapaxes(v, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    return {
        "means2d": means2d, "cov2d": cov2d, "depths": depths,
        "culled": culled, "cam_points": xc, "jacobians": jac, "v": v,
    }


def splat_rects(means2d: np.ndarray, cov2d: np.ndarray, width: int, height: int):
    """Integer pixel rectangles containing the 3-sigma footprint.

    A pixel (px, py) belongs to the rect iff its center lies within
    CUTOFF_SIGMA * sqrt(lambda_max) of the mean on both axes; empty rects
    come out with x0 > x1.
    """
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
    radius = CUTOFF_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    x0 = np.ceil(means2d[:, 0] - radius - 0.5).astype(np.int64)
    x1 = np.floor(means2d[:, 0] + radius - 0.5).astype(np.int64)
    y0 = np.ceil(means2d[:, 1] - radius - 0.5).astype(np.int64)
    y1 = np.floor(means2d[:, 1] + radius - 0.5).astype(np.int64)
    x0 = np.clip(x0, 0, width)       # x0 == width keeps the rect empty
    x1 = np.clip(x1, -1, width - 1)
    y0 = np.clip(y0, 0, height)
    y1 = np.clip(y1, -1, height - 1)
    return np.stack([x0, x1, y0, y1], axis=1)


def _inverse_cov2d(cov2d: np.ndarray):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise AssertionError("2D covariance must stay positive definite after the floor")
    qinv = np.stack([c / det, -b / det, a / det], axis=1)  # (Qxx, Qxy, Qyy)
    return qinv


def _prepare(gset: PosedGaussianSet, cam: Camera, tile_size: int):
    """Shared forward state: projection, colors, sort order, tile bins."""
    n = len(gset)
    cov3d = covariance_3d_batch(gset.rotations, gset.scales)
    proj = project_batch(np.asarray(gset.positions, dtype=np.float64), cov3d, cam)
    keep = ~proj["culled"]
    order = np.nonzero(keep)[0]
    # Stable sort by depth; ties resolved by ascending gaussian index.
    order = order[np.argsort(proj["depths"][order], kind="stable")]

    means2d = proj["means2d"][order]
    cov2d = proj["cov2d"][order]
    depths = proj["depths"][order]
    qinv = _inverse_cov2d(cov2d)
    rects = splat_rects(means2d, cov2d, cam.width, cam.height)

    cam_pos = cam.position
    view = np.asarray(gset.positions, dtype=np.float64)[order] - cam_pos
    view_norm = np.linalg.norm(view, axis=-1, keepdims=True)
    view_norm = np.where(view_norm < 1e-12, 1.0, view_norm)
    dirs = view / view_norm
    store = GaussianColorStore(gset.colors.coeffs[order], gset.colors.degree)
    colors = sh_eval(store, dirs)
    alphas = np.asarray(gset.opacities, dtype=np.float64)[order]

    tiles_x = (cam.width + tile_size - 1) // tile_size
    tiles_y = (cam.height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    spans = []
    for i in range(order.size):
        x0, x1, y0, y1 = rects[i]
        if x0 > x1 or y0 > y1:
            spans.append(None)
            continue
        span = (x0 // tile_size, x1 // tile_size, y0 // tile_size, y1 // tile_size)
        spans.append(span)
        for tyy in range(span[2], span[3] + 1):
            counts[tyy * tiles_x + span[0] : tyy * tiles_x + span[1] + 1] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    items = np.empty(int(offsets[-1]), dtype=np.int64)
    cursor = offsets[:-1].copy()
    for i, span in enumerate(spans):
        if span is None:
            continue
        for tyy in range(span[2], span[3] + 1):
            for txx in range(span[0], span[1] + 1):
                tile = tyy * tiles_x + txx
                items[cursor[tile]] = i
                cursor[tile] += 1

    return {
        "order": order, "means2d": means2d, "cov2d": cov2d, "qinv": qinv,
        "rects": rects, "depths": depths, "dirs": dirs, "view_norm": view_norm,
        "colors": colors, "alphas": alphas, "store": store,
        "tiles_x": tiles_x, "offsets": offsets, "items": items,
        "cam_points": proj["cam_points"][order],
        "jacobians": proj["jacobians"][order], "v": proj["v"][order],
    }


def render(gset: PosedGaussianSet, cam: Camera,
           background=(0.0, 0.0, 0.0), tile_size: int = 16) -> RenderedImage:
    """Splat the set through `cam`; see the module docstring for the rules."""
    rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    transmit = np.ones((cam.height, cam.width), dtype=np.float64)
    count = np.zeros((cam.height, cam.width), dtype=np.int32)
    bg = np.asarray(background, dtype=np.float64)
    if len(gset) == 0:
        rgb[:] = bg
        return RenderedImage(rgb, transmit, count)
    st = _prepare(gset, cam, tile_size)
    _kernels.rasterize_forward(
        cam.width, cam.height, tile_size, st["tiles_x"],
        st["offsets"], st["items"],
        st["means2d"], st["qinv"], st["rects"], st["alphas"], st["colors"], bg,
        rgb, transmit, count,
    )
    return RenderedImage(rgb, transmit, count)


def render_backward(gset: PosedGaussianSet, cam: Camera, upstream: np.ndarray,
                    background=(0.0, 0.0, 0.0), tile_size: int = 16) -> dict:
    """Analytic gradients of render w.r.t. gaussian attributes.

    Returns dict with d_positions, d_rotations, d_scales, d_opacities,
    d_sh, all in the input (unsorted) indexing. The depth ordering, tile
    binning, alpha' < 1/255 skips, and termination are treated as
    piecewise constant, matching the forward definition.
    """
    n = len(gset)
    grads = {
        "d_positions": np.zeros((n, 3), dtype=np.float64),
        "d_rotations": np.zeros((n, 4), dtype=np.float64),
        "d_scales": np.zeros((n, 3), dtype=np.float64),
        "d_opacities": np.zeros(n, dtype=np.float64),
        "d_sh": np.zeros_like(gset.colors.coeffs, dtype=np.float64),
    }
    if n == 0:
        return grads
    st = _prepare(gset, cam, tile_size)
    m = st["order"].size
    d_means = np.zeros((m, 2), dtype=np.float64)
    d_qinv = np.zeros((m, 3), dtype=np.float64)
    d_alphas = np.zeros(m, dtype=np.float64)
    d_colors = np.zeros((m, 3), dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    _kernels.rasterize_backward(
        cam.width, cam.height, tile_size, st["tiles_x"],
        st["offsets"], st["items"],
        st["means2d"], st["qinv"], st["rects"], st["alphas"], st["colors"], bg,
        np.ascontiguousarray(upstream, dtype=np.float64),
        d_means, d_qinv, d_alphas, d_colors,
    )

    # qinv -> cov2d through the 2x2 inverse: dSigma = -Q G Q.
    q_full = np.empty((m, 2, 2), dtype=np.float64)
    q_full[:, 0, 0] = st["qinv"][:, 0]
    q_full[:, 0, 1] = q_full[:, 1, 0] = st["qinv"][:, 1]
    q_full[:, 1, 1] = st["qinv"][:, 2]
    g_q = np.empty((m, 2, 2), dtype=np.float64)
    g_q[:, 0, 0] = d_qinv[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * d_qinv[:, 1]
    g_q[:, 1, 1] = d_qinv[:, 2]
    d_cov2d = -q_full @ g_q @ q_full

    # cov2d = V Sigma V^T + floor.
    v = st["v"]
    cov3d = covariance_3d_batch(gset.rotations, gset.scales)[st["order"]]
    d_v = 2.0 * d_cov2d @ v @ cov3d
    d_cov3d = np.swapaxes(v, 1, 2) @ d_cov2d @ v

    # V = J W: only J depends on the gaussian.
    d_jac = d_v @ cam.rotation.T
    xc = st["cam_points"]
    z = xc[:, 2]
    d_xc = np.zeros((m, 3), dtype=np.float64)
    d_xc[:, 0] += d_jac[:, 0, 2] * (-cam.fx / z**2)
    d_xc[:, 1] += d_jac[:, 1, 2] * (-cam.fy / z**2)
    d_xc[:, 2] += (
        d_jac[:, 0, 0] * (-cam.fx / z**2)
        + d_jac[:, 0, 2] * (2.0 * cam.fx * xc[:, 0] / z**3)
        + d_jac[:, 1, 1] * (-cam.fy / z**2)
        + d_jac[:, 1, 2] * (2.0 * cam.fy * xc[:, 1] / z**3)
    )
    # Projected-mean path.
    d_xc[:, 0] += d_means[:, 0] * cam.fx / z
    d_xc[:, 1] += d_means[:, 1] * cam.fy / z
    d_xc[:, 2] += -(d_means[:, 0] * cam.fx * xc[:, 0]
                    + d_means[:, 1] * cam.fy * xc[:, 1]) / z**2
    d_pos_sorted = d_xc @ cam.rotation

    # Sigma = R diag(s^2) R^T.
    qn = normalize_quat(np.asarray(gset.rotations, dtype=np.float64)[st["order"]])
    r = quat_to_matrix(qn)
    s = np.asarray(gset.scales, dtype=np.float64)[st["order"]]
    d_r = 2.0 * d_cov3d @ r * (s**2)[:, None, :]
    rt_g_r = np.einsum("nji,njk,nkl->nil", r, d_cov3d, r)
    d_s = 2.0 * s * np.einsum("nii->ni", rt_g_r)
    d_qn = quat_to_matrix_vjp(qn, d_r)
    d_quat_sorted = normalize_quat_vjp(
        np.asarray(gset.rotations, dtype=np.float64)[st["order"]], d_qn
    )

    # SH color path, including the view-direction dependence on position.
    d_coeffs, d_dirs = sh_eval_vjp(st["store"], st["dirs"], d_colors)
    dirs = st["dirs"]
    proj_perp = d_dirs - dirs * np.sum(dirs * d_dirs, axis=-1, keepdims=True)
    d_pos_sorted = d_pos_sorted + proj_perp / st["view_norm"]

    order = st["order"]
    grads["d_positions"][order] = d_pos_sorted
    grads["d_rotations"][order] = d_quat_sorted
    grads["d_scales"][order] = d_s
    grads["d_opacities"][order] = d_alphas
    grads["d_sh"][order] = d_coeffs
    return grads


def save_png(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    img = (np.round(arr * 255.0)).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_float_dump(rgb: np.ndarray, path) -> None:
    """Raw dump: magic R3IM, u32 width, u32 height, float32 RGB rows."""
    arr = np.ascontiguousarray(np.asarray(rgb, dtype=np.float32))
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"R3IM")
        f.write(struct.pack("<II", w, h))
        f.write(arr.tobytes())


def load_float_dump(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"R3IM":
            raise ValueError(f"not a float image dump (magic {magic!r})")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(w * h * 12), dtype=np.float32)
    return data.reshape(h, w, 3)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)
