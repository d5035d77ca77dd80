"""Optimization loop for the avatar.

Photometric loss (L1 + SSIM), first-order adaptive-moment updates with
per-group rates, and periodic density control (pruning plus a soft
opacity reset through the per-gaussian bias). One (view, frame) pair per
step. Moment state is kept in float64 keyed by parameter name so a run
with the same seed replays bit-identically and survives compaction.
"""

from dataclasses import dataclass, field, fields
import csv

import numpy as np
from scipy import ndimage

from .avatar import avatar_backward, avatar_features, avatar_forward, frame_to_time
from .decoder import decode_batch
from .rasterizer import render, render_backward

RESET_CEILING = 0.01
# per-gaussian optimizer slots that must be row-compacted on prune
PER_GAUSSIAN_SLOTS = ("sh", "positions", "base_logits", "opacity_bias")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, group):
        super().__init__(f"non-finite value in parameter group '{group}'")
        self.group = group


@dataclass
class TrainingConfig:
    iterations: int = 5000
    lr_planes: float = 1e-2
    lr_decoder: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_positions: float = 1.6e-4
    lr_logits: float = 1e-3
    ssim_weight: float = 0.2
    prune_interval: int = 500
    prune_opacity: float = 0.005
    max_scale_ratio: float = 0.5
    opacity_reset_interval: int = 1_000_000_000
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration count must be non-negative")
        for name in ("lr_planes", "lr_decoder", "lr_sh", "lr_positions", "lr_logits"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim weight must lie in [0, 1]")
        if self.prune_interval < 1 or self.opacity_reset_interval < 1:
            raise ValueError("control intervals must be at least 1")
        if self.prune_opacity < 0.0:
            raise ValueError("prune opacity threshold must be non-negative")
        self.background = tuple(float(c) for c in self.background)
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FrameSample:
    """One supervision record: normalized time, pose, camera, target image."""

    time: float
    pose: object
    camera: object
    target: np.ndarray


@dataclass
class TrainingSet:
    """Multi-view supervision aligned by view name and frame index."""

    cameras: dict  # view -> Camera
    poses: dict  # frame index -> Pose
    images: dict  # (view, frame) -> (H, W, 3) float64 in [0, 1]
    frame_count: int

    def __post_init__(self):
        if not self.images:
            raise ValueError("training set has no images")
        if self.frame_count < 2:
            raise ValueError("frame count must be at least 2")
        for (view, frame), img in self.images.items():
            if view not in self.cameras:
                raise ValueError(f"image references unknown view {view!r}")
            if frame not in self.poses:
                raise ValueError(f"image references frame {frame} with no pose")
            cam = self.cameras[view]
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image for {(view, frame)} does not match its camera")

    @property
    def pairs(self):
        return sorted(self.images)


class AdamMoments:
    """Named-slot adaptive moments; slots compact with the gaussian arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.slots = {}  # name -> [m, v, step]

    def update(self, name, param, grad, lr):
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in self.slots:
            self.slots[name] = [np.zeros(param.shape), np.zeros(param.shape), 0]
        slot = self.slots[name]
        m, v, _ = slot
        slot[2] += 1
        t = slot[2]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        param[...] = (param.astype(np.float64) - step).astype(param.dtype)

    def compact(self, name, idx):
        if name in self.slots:
            m, v, t = self.slots[name]
            self.slots[name] = [m[idx].copy(), v[idx].copy(), t]


def ssim_window(height, width):
    """(window size, gaussian?) used for images of the given size.

    11x11 gaussian (sigma 1.5) when it fits, else the largest odd uniform
    window. Population covariance in both cases.
    """
    if min(height, width) >= 11:
        return 11, True
    win = min(height, width)
    win = win if win % 2 else win - 1
    if win < 3:
        raise ValueError("image too small for SSIM")
    return win, False


def _ssim_kernel(win, gaussian):
    if gaussian:
        r = (win - 1) // 2
        g = np.exp(-np.arange(-r, r + 1) ** 2 / (2.0 * 1.5**2))
        g /= g.sum()
        return np.outer(g, g)
    return np.full((win, win), 1.0 / (win * win))


def _ssim_with_gradient(rendered, target, data_range=1.0):
    """Mean SSIM over valid windows and its exact gradient w.r.t. rendered.

    In-repo because skimage's gradient=True implements an approximation
    that does not pass a finite-difference check of its own value.
    """
    h, w, channels = rendered.shape
    win, gaussian = ssim_window(h, w)
    kernel = _ssim_kernel(win, gaussian)
    pad = (win - 1) // 2
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    valid = (slice(pad, h - pad), slice(pad, w - pad))
    m = (h - 2 * pad) * (w - 2 * pad)

    def filt(img):
        return ndimage.correlate(img, kernel, mode="constant")

    total = 0.0
    grad = np.zeros((h, w, channels))
    for c in range(channels):
        x = rendered[:, :, c]
        y = target[:, :, c]
        ux, uy = filt(x), filt(y)
        uxx, uyy, uxy = filt(x * x), filt(y * y), filt(x * y)
        a1 = 2.0 * ux * uy + c1
        a2 = 2.0 * (uxy - ux * uy) + c2
        b1 = ux * ux + uy * uy + c1
        b2 = (uxx - ux * ux) + (uyy - uy * uy) + c2
        d = b1 * b2
        s = a1 * a2 / d
        total += s[valid].mean()
        # adjoint of the (symmetric) window filter under the valid crop
        u = np.zeros((h, w))
        u[valid] = 1.0 / (m * channels)
        d_ux = u * (2.0 * uy * (a2 - a1) - 2.0 * ux * s * (b2 - b1)) / d
        d_uxx = u * (-s / b2)
        d_uxy = u * (2.0 * a1 / d)
        grad[:, :, c] = filt(d_ux) + 2.0 * x * filt(d_uxx) + y * filt(d_uxy)
    return total / channels, grad


def loss_and_gradient(rendered, target, ssim_weight=0.2):
    """(1 - w) * L1 + w * (1 - SSIM) and its gradient w.r.t. the render."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("render and target shapes differ")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    ssim_value, d_ssim = _ssim_with_gradient(rendered, target)
    loss = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim_value)
    d_render = (1.0 - ssim_weight) * np.sign(diff) / diff.size - ssim_weight * d_ssim
    return loss, l1, ssim_value, d_render


def _grad_leaves(value):
    if isinstance(value, (list, tuple)):
        for item in value:
            yield from _grad_leaves(item)
    elif value is not None:
        yield value


def _require_finite(loss, grads):
    if not np.isfinite(loss):
        raise NonFiniteLossError("loss")
    for group, value in grads.items():
        for leaf in _grad_leaves(value):
            if not np.all(np.isfinite(leaf)):
                raise NonFiniteLossError(group)


def _named_updates(avatar, grads):
    """Yield (slot name, parameter array, gradient, rate attribute)."""
    if grads["planes"] is not None:
        for s, planes in enumerate(avatar.codebook.scales):
            for p, plane in enumerate(planes):
                yield f"planes.{s}.{p}", plane.data, grads["planes"][s][p], "lr_planes"
    net = avatar.decoder.net
    for i, g in enumerate(grads["decoder_w"]):
        yield f"decoder_w.{i}", net.weights[i], g, "lr_decoder"
    for i, g in enumerate(grads["decoder_b"]):
        yield f"decoder_b.{i}", net.biases[i], g, "lr_decoder"
    yield "sh", avatar.colors.coeffs, grads["sh"], "lr_sh"
    yield "positions", avatar.positions, grads["positions"], "lr_positions"
    yield "base_logits", avatar.blend_field.base_logits, grads["base_logits"], "lr_logits"
    lbs = avatar.blend_field.net
    for i, g in enumerate(grads["lbs_w"]):
        yield f"lbs_w.{i}", lbs.weights[i], g, "lr_logits"
    for i, g in enumerate(grads["lbs_b"]):
        yield f"lbs_b.{i}", lbs.biases[i], g, "lr_logits"
    yield "opacity_bias", avatar.opacity_bias, grads["opacity_bias"], "lr_decoder"


def training_step(avatar, sample, cfg, optimizer):
    """One forward/backward/update pass; returns the loss terms."""
    cam = sample.camera
    if sample.target.shape != (cam.height, cam.width, 3):
        raise ValueError("target image does not match the camera size")
    cache = {}
    gset = avatar_forward(avatar, sample.pose, times=sample.time, cache=cache)
    image = render(gset, cam, background=cfg.background)
    loss, l1, ssim_value, d_render = loss_and_gradient(
        image.rgb, sample.target, cfg.ssim_weight)
    render_grads = render_backward(gset, cam, d_render, background=cfg.background)
    grads = avatar_backward(avatar, cache, render_grads)
    _require_finite(loss, grads)
    for name, param, grad, rate_attr in _named_updates(avatar, grads):
        optimizer.update(name, param, grad, getattr(cfg, rate_attr))
    return {"loss": loss, "l1": l1, "ssim": ssim_value}


def _sample_decode(avatar, poses=None, n_samples=8):
    """Decoded opacity mean, max scale, and max opacity logit per gaussian.

    Time conditioning samples n_samples uniform timestamps; pose
    conditioning decodes at the given poses instead.
    """
    if poses is not None:
        samples = list(poses)
    else:
        samples = np.linspace(0.0, 1.0, n_samples)
    n = avatar.n_gaussians
    opacity_sum = np.zeros(n)
    scale_max = np.zeros(n)
    raw3_max = np.full(n, -np.inf)
    raw_offset = np.zeros((n, 11))
    raw_offset[:, 3] = avatar.opacity_bias.astype(np.float64)
    for s in samples:
        if poses is not None:
            feats, _ = avatar_features(avatar, pose=s)
        else:
            feats, _ = avatar_features(avatar, times=float(s))
        cache = {}
        _, opacity, _, scale = decode_batch(
            avatar.decoder, feats, raw_offset=raw_offset, cache=cache)
        opacity_sum += opacity
        scale_max = np.maximum(scale_max, scale.max(axis=1))
        raw3_max = np.maximum(raw3_max, cache["raw"][:, 3])
    return opacity_sum / len(samples), scale_max, raw3_max


def reset_opacity(avatar, poses=None, ceiling=RESET_CEILING):
    """Lower each opacity bias so decoded opacity is at most the ceiling
    at every sampled conditioning input. Never raises a bias."""
    _, _, raw3_max = _sample_decode(avatar, poses=poses)
    bias = avatar.opacity_bias.astype(np.float64)
    target_logit = np.log(ceiling / (1.0 - ceiling))
    # 1e-4 margin absorbs the cast back to the parameter dtype
    shifted = target_logit - (raw3_max - bias) - 1e-4
    avatar.opacity_bias[...] = np.minimum(bias, shifted).astype(avatar.opacity_bias.dtype)
    return avatar


def density_control(avatar, cfg, iteration, optimizer=None, poses=None):
    """Prune dim or oversized gaussians and reset opacity on schedule."""
    if iteration < 1:
        return avatar
    prune_due = iteration % cfg.prune_interval == 0
    reset_due = iteration % cfg.opacity_reset_interval == 0
    if not (prune_due or reset_due):
        return avatar
    if prune_due:
        mean_opacity, max_scale, _ = _sample_decode(avatar, poses=poses)
        lo, hi = avatar.bbox
        diagonal = float(np.linalg.norm(hi - lo))
        keep = (mean_opacity >= cfg.prune_opacity) & (
            max_scale <= cfg.max_scale_ratio * diagonal)
        if not keep.any():
            raise TrainingError("density control pruned every gaussian")
        if not keep.all():
            idx = np.flatnonzero(keep)
            avatar = avatar.keep(idx)
            if optimizer is not None:
                for name in PER_GAUSSIAN_SLOTS:
                    optimizer.compact(name, idx)
    if reset_due:
        avatar = reset_opacity(avatar, poses=poses)
    return avatar


def _pair_order(rng, n_pairs, iterations):
    order = []
    while len(order) < iterations:
        order.extend(int(i) for i in rng.permutation(n_pairs))
    return order[:iterations]


def train(avatar, dataset, cfg, optimizer=None, log_path=None):
    """Optimize over epoch-shuffled (view, frame) pairs.

    Returns (trained avatar, loss log rows). Pass an AdamMoments to keep
    the optimizer state for checkpointing.
    """
    if optimizer is None:
        optimizer = AdamMoments()
    rng = np.random.default_rng(cfg.seed)
    pairs = dataset.pairs
    order = _pair_order(rng, len(pairs), cfg.iterations)
    control_poses = None
    if avatar.conditioning == "pose":
        frames = sorted(dataset.poses)
        pick = np.linspace(0, len(frames) - 1, min(8, len(frames))).astype(int)
        control_poses = [dataset.poses[frames[i]] for i in pick]
    rows = []
    for it in range(1, cfg.iterations + 1):
        view, frame = pairs[order[it - 1]]
        sample = FrameSample(
            time=frame_to_time(frame, dataset.frame_count),
            pose=dataset.poses[frame],
            camera=dataset.cameras[view],
            target=dataset.images[(view, frame)],
        )
        stats = training_step(avatar, sample, cfg, optimizer)
        rows.append({
            "iteration": it,
            "loss": stats["loss"],
            "l1": stats["l1"],
            "ssim": stats["ssim"],
            "gaussian_count": avatar.n_gaussians,
        })
        avatar = density_control(avatar, cfg, it, optimizer=optimizer,
                                 poses=control_poses)
    if log_path is not None:
        write_loss_log(log_path, rows)
    return avatar, rows


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "l1", "ssim", "gaussian_count"])
        for r in rows:
            writer.writerow([r["iteration"], repr(float(r["loss"])),
                             repr(float(r["l1"])), repr(float(r["ssim"])),
                             r["gaussian_count"]])


def read_loss_log(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "iteration": int(rec["iteration"]),
                "loss": float(rec["loss"]),
                "l1": float(rec["l1"]),
                "ssim": float(rec["ssim"]),
                "gaussian_count": int(rec["gaussian_count"]),
            })
    return rows
