"""Canonical avatar assembly and the differentiable forward pipeline.

An avatar bundles everything learned during recording: the temporal plane
codebook, the shared gaussian decoder with its per-gaussian opacity bias,
spherical-harmonic colors, base canonical centers, and the blend-weight
field over a fixed skeleton.  One forward pass encodes the centers at a
normalized time, decodes per-gaussian deltas, offsets the centers, blends
joint transforms, and hands a posed gaussian set to the rasterizer.

Conditioning is "time" for the full pipeline.  The "pose" mode feeds the
same decoder a tiled copy of the skeletal pose vector instead of plane
features; it exists as a comparison arm and shares every other stage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import hexplane as hx
from .decoder import DecoderNetwork, decode_batch, decoder_gradient_batch, init_decoder
from .hexplane import HexPlaneCodebook, init_codebook
from .rasterizer import Camera, PosedGaussianSet, render, render_backward
from .sh import GaussianColorStore, n_coeffs
from .skinning import (
    BlendWeightField,
    Skeleton,
    assign_gaussian_parts,
    blend_weights_backward,
    blend_weights_batch,
    forward_kinematics,
    init_blend_field,
    warp_backward,
    warp_gaussians,
)

CONDITIONING_MODES = ("time", "pose")


@dataclass
class CanonicalAvatar:
    """All learned state plus the skeleton it animates over."""

    skeleton: Skeleton
    codebook: HexPlaneCodebook
    decoder: DecoderNetwork
    colors: GaussianColorStore
    blend_field: BlendWeightField
    positions: np.ndarray
    opacity_bias: np.ndarray
    frame_count: int
    conditioning: str = "time"

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError("positions must be (N, 3)")
        if self.opacity_bias.shape != (n,):
            raise ValueError("opacity bias must be (N,)")
        if self.colors.coeffs.shape[0] != n or self.blend_field.gaussian_count != n:
            raise ValueError("per-gaussian array counts disagree")
        if self.blend_field.joint_count != self.skeleton.joint_count:
            raise ValueError("blend field joint count does not match skeleton")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")
        if self.frame_count < 2:
            raise ValueError("frame count must be at least 2")
        if self.decoder.net.in_dim != self.codebook.feature_dim:
            raise ValueError("decoder input does not match feature dim")
        lo, hi = self.codebook.bbox
        if n and (np.any(self.positions < lo - 1e-6) or np.any(self.positions > hi + 1e-6)):
            raise ValueError("positions must lie inside the codebook bbox")

    @property
    def n_gaussians(self):
        return self.positions.shape[0]

    @property
    def bbox(self):
        return self.codebook.bbox

    def keep(self, idx):
        """Compact every per-gaussian array to the kept index set."""
        return replace(
            self,
            colors=self.colors.keep(idx),
            blend_field=self.blend_field.keep(idx),
            positions=self.positions[idx].copy(),
            opacity_bias=self.opacity_bias[idx].copy(),
        )


def frame_to_time(frame, frame_count):
    """Shared frame-to-normalized-time mapping, real-valued frames allowed."""
    if frame_count < 2:
        raise ValueError("frame count must be at least 2")
    return float(frame) / float(frame_count - 1)


def pose_feature(pose, dim):
    """Skeletal pose tiled out to the decoder's input width."""
    flat = np.asarray(pose.thetas, dtype=np.float64).reshape(-1)
    reps = int(np.ceil(dim / flat.size))
    return np.tile(flat, reps)[:dim]


def sample_bone_points(skel, n, rng, radius=0.1):
    """Uniform samples inside the rest-pose bone capsules."""
    child = np.flatnonzero(skel.parents >= 0)
    if len(child) == 0:
        center = skel.rest_positions[skel.root]
        return center + _ball_samples(n, rng) * radius
    bones = rng.integers(0, len(child), size=n)
    a = skel.rest_positions[skel.parents[child[bones]]]
    b = skel.rest_positions[child[bones]]
    u = rng.uniform(0.0, 1.0, size=(n, 1))
    return a + u * (b - a) + _ball_samples(n, rng) * radius


def _ball_samples(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    return v * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)


def init_avatar(skel, rng, n_gaussians, frame_count, *,
                spatial_resolutions=(64, 128, 256), time_resolution=50,
                channels=32, decoder_layers=2, decoder_width=256,
                lbs_layers=4, lbs_width=128, sh_degree=1,
                capsule_radius=0.1, bbox_margin=0.5,
                opacity_init=0.1, scale_init=0.05, max_offset=0.1,
                conditioning="time"):
    """Fresh avatar with capsule-sampled centers and a bbox that encloses
    the rest skeleton with margin for pose-driven offsets."""
    positions = sample_bone_points(skel, n_gaussians, rng, radius=capsule_radius)
    lo = skel.rest_positions.min(axis=0) - capsule_radius - bbox_margin
    hi = skel.rest_positions.max(axis=0) + capsule_radius + bbox_margin
    codebook = init_codebook(
        np.stack([lo, hi]), rng, spatial_resolutions=spatial_resolutions,
        time_resolution=time_resolution, channels=channels)
    decoder = init_decoder(codebook.feature_dim, rng, hidden_layers=decoder_layers,
                           width=decoder_width, opacity_init=opacity_init,
                           scale_init=scale_init, max_offset=max_offset)
    coeffs = np.zeros((n_gaussians, n_coeffs(sh_degree), 3), dtype=np.float32)
    coeffs[:, 0] = ((rng.uniform(0.35, 0.65, size=(n_gaussians, 3)) - 0.5)
                    / 0.28209479177387814).astype(np.float32)
    colors = GaussianColorStore(coeffs, sh_degree)
    blend = init_blend_field(skel, positions, rng,
                             hidden_layers=lbs_layers, width=lbs_width)
    return CanonicalAvatar(
        skeleton=skel, codebook=codebook, decoder=decoder, colors=colors,
        blend_field=blend, positions=positions.astype(np.float32),
        opacity_bias=np.zeros(n_gaussians, dtype=np.float32),
        frame_count=frame_count, conditioning=conditioning)


def avatar_features(avatar, times=None, pose=None):
    """Per-gaussian decoder inputs for one frame.

    Time conditioning samples the plane codebook at the base centers;
    pose conditioning tiles the pose vector identically for every gaussian.
    """
    n = avatar.n_gaussians
    if avatar.conditioning == "time":
        if times is None:
            raise ValueError("time conditioning needs timestamps")
        ts = np.full(n, float(times)) if np.ndim(times) == 0 else np.asarray(times)
        return hx.encode_batch(avatar.codebook,
                               avatar.positions.astype(np.float64), ts), ts
    if pose is None:
        raise ValueError("pose conditioning needs the pose")
    row = pose_feature(pose, avatar.codebook.feature_dim)
    return np.tile(row, (n, 1)), None


def avatar_forward(avatar, pose, times=None, features=None, cache=None):
    """Full pipeline to a renderable posed gaussian set.

    ``features`` overrides the encoded inputs (used for smoothed animation
    features); gradient support requires the default path.
    """
    ts = None
    if features is None:
        features, ts = avatar_features(avatar, times=times, pose=pose)
    n = avatar.n_gaussians
    raw_offset = np.zeros((n, 11))
    raw_offset[:, 3] = avatar.opacity_bias.astype(np.float64)
    dec_cache = {} if cache is not None else None
    delta, opacity, quat, scale = decode_batch(
        avatar.decoder, features, raw_offset=raw_offset, cache=dec_cache)
    offset_positions = avatar.positions.astype(np.float64) + delta
    blend_cache = {} if cache is not None else None
    weights = blend_weights_batch(avatar.blend_field, offset_positions,
                                  cache=blend_cache)
    jt = forward_kinematics(avatar.skeleton, pose)
    warp_cache = {} if cache is not None else None
    x_o, q_o, degenerate = warp_gaussians(offset_positions, quat, weights, jt,
                                          cache=warp_cache)
    parts = assign_gaussian_parts(weights, avatar.skeleton)
    gset = PosedGaussianSet(x_o, q_o, scale, opacity, avatar.colors,
                            part_labels=parts, degenerate=degenerate)
    if cache is not None:
        cache.update(times=ts, features=features, dec=dec_cache,
                     blend=blend_cache, warp=warp_cache)
    return gset


def avatar_backward(avatar, cache, render_grads):
    """Chain rasterizer gradients back to every learned group.

    Returns a dict with plane gradients (None under pose conditioning),
    decoder weight/bias lists, SH coefficients, base positions, blend
    logits, blend net weight/bias lists, and the opacity bias.
    """
    d_x_prime, d_q_c, d_weights = warp_backward(
        cache["warp"], render_grads["d_positions"], render_grads["d_rotations"])
    d_logits, d_lbs_w, d_lbs_b, d_x_blend = blend_weights_backward(
        avatar.blend_field, cache["blend"], d_weights)
    d_x_prime = d_x_prime + d_x_blend
    d_dec_w, d_dec_b, d_feats, d_raw = decoder_gradient_batch(
        avatar.decoder, cache["dec"], d_x_prime, render_grads["d_opacities"],
        d_q_c, render_grads["d_scales"])
    d_positions = d_x_prime.copy()
    plane_grads = None
    if avatar.conditioning == "time":
        plane_grads, d_x_enc, _ = hx.encode_gradient_batch(
            avatar.codebook, avatar.positions.astype(np.float64),
            cache["times"], d_feats)
        d_positions += d_x_enc
    return {
        "planes": plane_grads,
        "decoder_w": d_dec_w,
        "decoder_b": d_dec_b,
        "sh": render_grads["d_sh"],
        "positions": d_positions,
        "base_logits": d_logits,
        "lbs_w": d_lbs_w,
        "lbs_b": d_lbs_b,
        "opacity_bias": d_raw[:, 3].copy(),
    }


def avatar_parts(avatar):
    """Static per-gaussian part labels from weights at the base centers."""
    weights = blend_weights_batch(avatar.blend_field,
                                  avatar.positions.astype(np.float64))
    return assign_gaussian_parts(weights, avatar.skeleton)


def decoded_opacities(avatar, times, poses=None):
    """Decoded opacity per gaussian at each of the given normalized times.

    Pose conditioning ignores the times and samples the given poses instead.
    """
    samples = times if poses is None else poses
    out = np.zeros((len(samples), avatar.n_gaussians))
    raw_offset = np.zeros((avatar.n_gaussians, 11))
    raw_offset[:, 3] = avatar.opacity_bias.astype(np.float64)
    for i, s in enumerate(samples):
        if poses is None:
            feats, _ = avatar_features(avatar, times=s)
        else:
            feats, _ = avatar_features(avatar, pose=s)
        _, opacity, _, _ = decode_batch(avatar.decoder, feats, raw_offset=raw_offset)
        out[i] = opacity
    return out


def render_avatar(avatar, pose, time_value=None, cam=None, background=(0.0, 0.0, 0.0),
                  features=None):
    gset = avatar_forward(avatar, pose, times=time_value, features=features)
    return render(gset, cam, background=background)
