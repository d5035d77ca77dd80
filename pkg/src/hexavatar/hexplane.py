"""Temporal hex-plane codebook.

Six feature planes per scale (xy, xz, yz, xt, yt, zt): a point is encoded
by bilinearly interpolating each plane at its coordinate pair, multiplying
the six results per channel, and concatenating across scales in ascending
resolution order. Positions live in a scene bbox mapped to [0, 1]^3;
time is already normalized to [0, 1]. The three time-carrying planes give
the codebook its query-by-timestamp behavior: nearby timestamps share
grid cells and therefore decode to nearby gaussian states.

Plane values init to uniform[1 - eps, 1 + eps] so products start near 1
and gradients flow through every scale from the first step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLANE_AXES = ("xy", "xz", "yz", "xt", "yt", "zt")
# Coordinate index per axis letter (x, y, z, t continues the convention).
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}
PLANE_AXIS_PAIRS = tuple(
    (_AXIS_INDEX[a], _AXIS_INDEX[b]) for a, b in PLANE_AXES
)


@dataclass
class FeaturePlane:
    axis_pair: str
    data: np.ndarray  # (rows, cols, channels); rows follow the first axis

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class HexPlaneCodebook:
    bbox: np.ndarray            # (2, 3) scene-space min / max corners
    scales: list                # per scale: list of 6 FeaturePlane in PLANE_AXES order

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError("bbox max must exceed bbox min on every axis")
        for planes in self.scales:
            if len(planes) != 6:
                raise ValueError("each scale needs exactly 6 planes")
            for plane, name in zip(planes, PLANE_AXES):
                if plane.axis_pair != name:
                    raise ValueError(f"plane order must follow {PLANE_AXES}")

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def channels(self) -> int:
        return self.scales[0][0].channels

    @property
    def feature_dim(self) -> int:
        return sum(planes[0].channels for planes in self.scales)

    def spatial_resolution(self, scale: int) -> int:
        return self.scales[scale][0].rows

    def time_resolution(self, scale: int) -> int:
        return self.scales[scale][3].cols


def init_codebook(
    bbox,
    rng: np.random.Generator,
    spatial_resolutions=(64, 128, 256),
    time_resolution: int = 50,
    channels: int = 32,
    init_eps: float = 0.1,
    dtype=np.float32,
) -> HexPlaneCodebook:
    scales = []
    for res in sorted(spatial_resolutions):
        planes = []
        for name, (a, b) in zip(PLANE_AXES, PLANE_AXIS_PAIRS):
            ra = time_resolution if a == 3 else res
            rb = time_resolution if b == 3 else res
            data = rng.uniform(1.0 - init_eps, 1.0 + init_eps, size=(ra, rb, channels))
            planes.append(FeaturePlane(name, np.asarray(data, dtype=dtype)))
        scales.append(planes)
    return HexPlaneCodebook(np.asarray(bbox, dtype=np.float64), scales)


def normalize_positions(cb: HexPlaneCodebook, xs: np.ndarray) -> np.ndarray:
    """Scene positions -> [0, 1]^3, clamped outside the bbox."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    u = (xs - cb.bbox[0]) / (cb.bbox[1] - cb.bbox[0])
    return np.clip(u, 0.0, 1.0)


def _corner_info(plane: FeaturePlane, ua: np.ndarray, ub: np.ndarray):
    """Cell indices and fractional offsets for grid coords in [0, 1]."""
    ra, rb = plane.rows, plane.cols
    ga = ua * (ra - 1)
    gb = ub * (rb - 1)
    ia = np.clip(np.floor(ga).astype(np.int64), 0, ra - 2)
    ib = np.clip(np.floor(gb).astype(np.int64), 0, rb - 2)
    return ia, ib, ga - ia, gb - ib


def _bilinear(plane: FeaturePlane, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    ia, ib, fa, fb = _corner_info(plane, ua, ub)
    d = plane.data.astype(np.float64)
    wa = fa[:, None]
    wb = fb[:, None]
    return (
        (1.0 - wa) * (1.0 - wb) * d[ia, ib]
        + (1.0 - wa) * wb * d[ia, ib + 1]
        + wa * (1.0 - wb) * d[ia + 1, ib]
        + wa * wb * d[ia + 1, ib + 1]
    )


def _coords4(cb: HexPlaneCodebook, xs: np.ndarray, ts) -> np.ndarray:
    u = normalize_positions(cb, xs)
    t = np.clip(np.asarray(ts, dtype=np.float64), 0.0, 1.0)
    t = np.broadcast_to(np.atleast_1d(t), (u.shape[0],))
    return np.concatenate([u, t[:, None]], axis=1)


def encode_batch(cb: HexPlaneCodebook, xs: np.ndarray, ts) -> np.ndarray:
    """Features (N, feature_dim) for positions (N, 3) and times (N,) or scalar."""
    coords = _coords4(cb, xs, ts)
    parts = []
    for planes in cb.scales:
        f = None
        for plane, (a, b) in zip(planes, PLANE_AXIS_PAIRS):
            v = _bilinear(plane, coords[:, a], coords[:, b])
            f = v if f is None else f * v
        parts.append(f)
    return np.concatenate(parts, axis=1)


def encode(cb: HexPlaneCodebook, x: np.ndarray, t: float) -> np.ndarray:
    """Feature vector (feature_dim,) for one position and timestamp."""
    return encode_batch(cb, np.asarray(x, dtype=np.float64)[None, :], float(t))[0]


def encode_smoothed(cb: HexPlaneCodebook, x: np.ndarray, t_prev: float, t_next: float) -> np.ndarray:
    """Mean of the features at two neighbor timestamps."""
    return 0.5 * (encode(cb, x, t_prev) + encode(cb, x, t_next))


def encode_smoothed_batch(cb: HexPlaneCodebook, xs: np.ndarray, t_prev, t_next) -> np.ndarray:
    return 0.5 * (encode_batch(cb, xs, t_prev) + encode_batch(cb, xs, t_next))


def zero_plane_grads(cb: HexPlaneCodebook) -> list:
    return [
        [np.zeros(p.data.shape, dtype=np.float64) for p in planes]
        for planes in cb.scales
    ]


def encode_gradient_batch(cb: HexPlaneCodebook, xs: np.ndarray, ts, upstream: np.ndarray):
    """Pull (N, feature_dim) upstream back to plane values, positions, times.

    Returns (plane_grads, d_xs, d_ts): plane_grads mirrors cb.scales,
    d_xs is (N, 3) in scene units, d_ts is (N,) in normalized time.
    Clamped coordinates (outside bbox or [0, 1] time) get zero gradient.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n = xs.shape[0]
    upstream = np.asarray(upstream, dtype=np.float64).reshape(n, cb.feature_dim)
    coords = _coords4(cb, xs, ts)
    extent = cb.bbox[1] - cb.bbox[0]
    t_arr = np.broadcast_to(np.atleast_1d(np.asarray(ts, dtype=np.float64)), (n,))
    inside = np.empty((n, 4), dtype=np.float64)
    inside[:, :3] = (xs >= cb.bbox[0]) & (xs <= cb.bbox[1])
    inside[:, 3] = (t_arr >= 0.0) & (t_arr <= 1.0)

    plane_grads = zero_plane_grads(cb)
    d_coords = np.zeros((n, 4), dtype=np.float64)

    col = 0
    for si, planes in enumerate(cb.scales):
        c = planes[0].channels
        up = upstream[:, col : col + c]
        col += c
        values = []
        corner = []
        for plane, (a, b) in zip(planes, PLANE_AXIS_PAIRS):
            ia, ib, fa, fb = _corner_info(plane, coords[:, a], coords[:, b])
            values.append(_bilinear(plane, coords[:, a], coords[:, b]))
            corner.append((ia, ib, fa, fb))
        # Leave-one-out products via prefix/suffix so zeros stay exact.
        prefix = [np.ones((n, c))]
        for v in values[:-1]:
            prefix.append(prefix[-1] * v)
        suffix = [np.ones((n, c))]
        for v in reversed(values[1:]):
            suffix.append(suffix[-1] * v)
        suffix.reverse()
        for pi, (plane, (a, b)) in enumerate(zip(planes, PLANE_AXIS_PAIRS)):
            d_v = up * prefix[pi] * suffix[pi]
            ia, ib, fa, fb = corner[pi]
            wa = fa[:, None]
            wb = fb[:, None]
            g = plane_grads[si][pi]
            np.add.at(g, (ia, ib), (1.0 - wa) * (1.0 - wb) * d_v)
            np.add.at(g, (ia, ib + 1), (1.0 - wa) * wb * d_v)
            np.add.at(g, (ia + 1, ib), wa * (1.0 - wb) * d_v)
            np.add.at(g, (ia + 1, ib + 1), wa * wb * d_v)
            d = plane.data.astype(np.float64)
            v00, v01 = d[ia, ib], d[ia, ib + 1]
            v10, v11 = d[ia + 1, ib], d[ia + 1, ib + 1]
            dv_dfa = (1.0 - wb) * (v10 - v00) + wb * (v11 - v01)
            dv_dfb = (1.0 - wa) * (v01 - v00) + wa * (v11 - v10)
            d_coords[:, a] += np.sum(d_v * dv_dfa, axis=1) * (plane.rows - 1)
            d_coords[:, b] += np.sum(d_v * dv_dfb, axis=1) * (plane.cols - 1)

    d_coords *= inside
    d_xs = d_coords[:, :3] / extent
    d_ts = d_coords[:, 3]
    return plane_grads, d_xs, d_ts


def encode_gradient(cb: HexPlaneCodebook, x: np.ndarray, t: float, upstream: np.ndarray):
    """Single-point form of encode_gradient_batch."""
    plane_grads, d_xs, d_ts = encode_gradient_batch(
        cb, np.asarray(x, dtype=np.float64)[None, :], float(t), upstream[None, :]
    )
    return plane_grads, d_xs[0], float(d_ts[0])
