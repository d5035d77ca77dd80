"""Gaussian decoder: codebook feature -> per-gaussian attribute deltas.

The net maps a feature vector to an 11-channel raw output which is
squashed into (position delta, opacity, rotation, scale):

    delta    = max_offset * tanh(raw[0:3])
    opacity  = sigmoid(raw[3])
    rotation = raw[4:8] / |raw[4:8]|   (identity if the norm is < 1e-8)
    scale    = clip(exp(raw[8:11]), 1e-6, max_scale)

decode_batch accepts an optional per-row raw_offset added before the
squashings; the trainer uses it for per-gaussian opacity bias so resets
never touch the shared net.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import Mlp, init_mlp, mlp_backward, mlp_forward, zeros_mlp

RAW_DIM = 11
SCALE_FLOOR = 1e-6


@dataclass
class DecoderNetwork:
    net: Mlp
    max_offset: float = 0.1
    max_scale: float = 10.0

    @property
    def in_dim(self) -> int:
        return self.net.in_dim


@dataclass
class DecodedGaussianDelta:
    delta: np.ndarray      # (3,) canonical position offset
    opacity: float
    rotation: np.ndarray   # (4,) unit quaternion (w, x, y, z)
    scale: np.ndarray      # (3,) per-axis standard deviations


def init_decoder(
    in_dim: int,
    rng: np.random.Generator,
    hidden_layers: int = 2,
    width: int = 256,
    max_offset: float = 0.1,
    max_scale: float = 10.0,
    opacity_init: float | None = None,
    scale_init: float | None = None,
    dtype=np.float32,
) -> DecoderNetwork:
    """He-init hidden stack, zero final layer, optional head biases.

    With the final layer at zero each gaussian starts at delta 0 and the
    identity rotation; opacity_init / scale_init seed the corresponding
    biases so training opens from a sensible blob instead of sigma = 1.
    """
    net = init_mlp(in_dim, RAW_DIM, hidden_layers, width, rng, dtype=dtype, final_zero=True)
    bias = net.biases[-1]
    if opacity_init is not None:
        p = min(max(opacity_init, 1e-6), 1.0 - 1e-6)
        bias[3] = np.log(p / (1.0 - p))
    bias[4] = 1.0  # rotation head opens at the identity quaternion
    if scale_init is not None:
        bias[8:11] = np.log(scale_init)
    return DecoderNetwork(net, max_offset=max_offset, max_scale=max_scale)


def zeros_decoder(in_dim: int, hidden_layers: int = 2, width: int = 256,
                  max_offset: float = 0.1, max_scale: float = 10.0) -> DecoderNetwork:
    return DecoderNetwork(zeros_mlp(in_dim, RAW_DIM, hidden_layers, width),
                          max_offset=max_offset, max_scale=max_scale)


def _squash(dec: DecoderNetwork, raw: np.ndarray):
    delta = dec.max_offset * np.tanh(raw[:, 0:3])
    opacity = 1.0 / (1.0 + np.exp(-raw[:, 3]))
    qraw = raw[:, 4:8]
    norm = np.linalg.norm(qraw, axis=-1, keepdims=True)
    fallback = np.zeros_like(qraw)
    fallback[:, 0] = 1.0
    quat = np.where(norm < 1e-8, fallback, qraw / np.where(norm < 1e-8, 1.0, norm))
    scale = np.clip(np.exp(raw[:, 8:11]), SCALE_FLOOR, dec.max_scale)
    return delta, opacity, quat, scale


def decode(dec: DecoderNetwork, feature: np.ndarray) -> DecodedGaussianDelta:
    """Decode one feature vector."""
    raw = mlp_forward(dec.net, np.asarray(feature, dtype=np.float64)[None, :])
    delta, opacity, quat, scale = _squash(dec, raw)
    return DecodedGaussianDelta(delta[0], float(opacity[0]), quat[0], scale[0])


def decode_batch(dec: DecoderNetwork, features: np.ndarray,
                 raw_offset: np.ndarray | None = None,
                 cache: dict | None = None):
    """Decode (N, in_dim) features to (delta, opacity, rotation, scale).

    With raw_offset None this is exactly decode applied per row. Pass a
    dict as cache to enable decoder_gradient_batch afterwards.
    """
    mlp_cache = [] if cache is not None else None
    raw = mlp_forward(dec.net, features, cache=mlp_cache)
    if raw_offset is not None:
        raw = raw + np.asarray(raw_offset, dtype=np.float64)
    delta, opacity, quat, scale = _squash(dec, raw)
    if cache is not None:
        cache["mlp"] = mlp_cache
        cache["raw"] = raw
    return delta, opacity, quat, scale


def _squash_vjp(dec: DecoderNetwork, raw: np.ndarray,
                d_delta, d_opacity, d_quat, d_scale) -> np.ndarray:
    d_raw = np.zeros_like(raw)
    t = np.tanh(raw[:, 0:3])
    d_raw[:, 0:3] = np.asarray(d_delta, dtype=np.float64) * dec.max_offset * (1.0 - t * t)
    sig = 1.0 / (1.0 + np.exp(-raw[:, 3]))
    d_raw[:, 3] = np.asarray(d_opacity, dtype=np.float64) * sig * (1.0 - sig)
    qraw = raw[:, 4:8]
    norm = np.linalg.norm(qraw, axis=-1, keepdims=True)
    safe = np.where(norm < 1e-8, 1.0, norm)
    qhat = qraw / safe
    dq = np.asarray(d_quat, dtype=np.float64)
    proj = (dq - qhat * np.sum(qhat * dq, axis=-1, keepdims=True)) / safe
    d_raw[:, 4:8] = np.where(norm < 1e-8, 0.0, proj)
    s = np.exp(raw[:, 8:11])
    inside = (s > SCALE_FLOOR) & (s < dec.max_scale)
    d_raw[:, 8:11] = np.asarray(d_scale, dtype=np.float64) * s * inside
    return d_raw


def decoder_gradient(dec: DecoderNetwork, feature: np.ndarray,
                     d_delta, d_opacity, d_quat, d_scale):
    """Single-feature gradients: (d_weights, d_biases, d_feature)."""
    cache: dict = {}
    decode_batch(dec, np.asarray(feature, dtype=np.float64)[None, :], cache=cache)
    d_raw = _squash_vjp(dec, cache["raw"],
                        np.asarray(d_delta)[None, :], np.asarray([d_opacity]),
                        np.asarray(d_quat)[None, :], np.asarray(d_scale)[None, :])
    d_x, d_w, d_b = mlp_backward(dec.net, cache["mlp"], d_raw)
    return d_w, d_b, d_x[0]


def decoder_gradient_batch(dec: DecoderNetwork, cache: dict,
                           d_delta, d_opacity, d_quat, d_scale):
    """Batch gradients from a decode_batch cache.

    Returns (d_weights, d_biases, d_features, d_raw_offset); the raw
    offset gradient equals d_raw row-wise since the offset is additive.
    """
    d_raw = _squash_vjp(dec, cache["raw"], d_delta, d_opacity, d_quat, d_scale)
    d_feats, d_w, d_b = mlp_backward(dec.net, cache["mlp"], d_raw)
    return d_w, d_b, d_feats, d_raw
