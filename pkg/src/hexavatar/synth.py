"""Deterministic synthetic articulated scenes with full ground truth.

A 9-joint biped driven by per-joint sinusoidal axis-angle tracks, plus an
"appendage": a cluster of gaussians whose world offset is a function of
the frame index with a period different from the skeletal motion. Frames
one motion-period apart therefore share a bitwise-identical pose but show
a different appearance, which is exactly the one-to-many ambiguity the
retrieval stage exists to resolve.

Images are rendered by this package's own rasterizer, so end-to-end
experiments measure the learning pipeline and not renderer mismatch.
"""

import json
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .rasterizer import Camera, PosedGaussianSet, load_png, look_at_camera, render, save_png
from .sh import color_store_from_rgb
from .skinning import (Pose, Skeleton, _segment_distances, forward_kinematics,
                       load_pose_track, load_skeleton, save_pose_track,
                       save_skeleton, warp_gaussians)
from .trainer import TrainingSet

GT_MAGIC = b"R3GT"
GT_VERSION = 1

# joint name -> (rotation axis, base amplitude in radians)
MOTION_TABLE = {
    "pelvis": ((0.0, 0.0, 1.0), 0.0),
    "spine": ((1.0, 0.0, 0.0), 0.15),
    "head": ((1.0, 0.0, 0.0), 0.10),
    "l_arm": ((0.0, 1.0, 0.0), 0.45),
    "l_hand": ((0.0, 1.0, 0.0), 0.30),
    "r_arm": ((0.0, 1.0, 0.0), 0.45),
    "r_hand": ((0.0, 1.0, 0.0), 0.30),
    "l_leg": ((1.0, 0.0, 0.0), 0.35),
    "r_leg": ((1.0, 0.0, 0.0), 0.35),
}

PART_PHASES = {"cb": 0.0, "la": 1.3, "ra": 1.3 + math.pi,
               "ll": 0.7, "rl": 0.7 + math.pi}


def biped_skeleton():
    names = ["pelvis", "spine", "head", "l_arm", "l_hand",
             "r_arm", "r_hand", "l_leg", "r_leg"]
    parents = np.array([-1, 0, 1, 1, 3, 1, 5, 0, 0])
    rest = np.array([
        [0.00, 0.0, 0.00],
        [0.00, 0.0, 0.45],
        [0.00, 0.0, 0.75],
        [-0.35, 0.0, 0.55],
        [-0.65, 0.0, 0.35],
        [0.35, 0.0, 0.55],
        [0.65, 0.0, 0.35],
        [-0.18, 0.0, -0.50],
        [0.18, 0.0, -0.50],
    ])
    parts = ["cb", "cb", "cb", "la", "la", "ra", "ra", "ll", "rl"]
    return Skeleton(names, parents, rest, parts)


@dataclass
class SynthSceneSpec:
    frame_count: int = 30
    image_size: int = 64
    camera_count: int = 8
    camera_radius: float = 3.2
    camera_elevation: float = 0.4
    focal: float = 100.0
    pose_period: int = 10
    appendage_period: int = 20
    motion_amplitude: float = 1.0
    appendage_amplitude: float = 0.12
    body_gaussians: int = 150
    appendage_gaussians: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 10:
            raise ValueError("frame count must be at least 10")
        if self.camera_count < 4:
            raise ValueError("camera count must be at least 4")
        if self.image_size < 8:
            raise ValueError("image size must be at least 8")
        if self.pose_period < 2 or self.appendage_period < 2:
            raise ValueError("periods must be at least 2 frames")
        if self.body_gaussians < 1 or self.appendage_gaussians < 1:
            raise ValueError("gaussian counts must be positive")
        if self.camera_radius <= 0 or self.focal <= 0:
            raise ValueError("camera radius and focal must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def pose_at(spec, skel, frame):
    """Sinusoidal axis-angle pose; bitwise periodic in spec.pose_period."""
    u = 2.0 * math.pi * ((frame % spec.pose_period) / spec.pose_period)
    thetas = np.zeros((skel.joint_count, 3))
    for j, name in enumerate(skel.names):
        axis, amp = MOTION_TABLE[name]
        phase = PART_PHASES[skel.part_labels[j]]
        angle = amp * spec.motion_amplitude * math.sin(u + phase)
        thetas[j] = np.asarray(axis) * angle
    return Pose(thetas, np.zeros(3))


def appendage_offset(spec, frame):
    """World-space cluster offset; bitwise periodic in spec.appendage_period."""
    u = 2.0 * math.pi * ((frame % spec.appendage_period) / spec.appendage_period)
    a = spec.appendage_amplitude
    return np.array([
        a * math.sin(u),
        0.15 * a * math.sin(2.0 * u),
        -0.5 * a * (1.0 - math.cos(u)),
    ])


def camera_ring(spec):
    cams = []
    target = np.array([0.0, 0.0, 0.1])
    size = spec.image_size
    for v in range(spec.camera_count):
        azimuth = 2.0 * math.pi * v / spec.camera_count
        position = np.array([
            spec.camera_radius * math.cos(azimuth),
            spec.camera_radius * math.sin(azimuth),
            spec.camera_elevation,
        ])
        cams.append(look_at_camera(position=position, target=target,
                                   fx=spec.focal, fy=spec.focal,
                                   width=size, height=size))
    return cams


@dataclass
class GroundTruthTrack:
    """Analytically posed gaussians for every frame, appendage flagged."""

    canonical_positions: np.ndarray  # (G, 3)
    joint_index: np.ndarray  # (G,) rigid bone assignment
    appendage_mask: np.ndarray  # (G,) bool
    scales: np.ndarray  # (G, 3)
    opacities: np.ndarray  # (G,)
    colors: np.ndarray  # (G, 3) plain rgb
    positions: np.ndarray  # (F, G, 3)
    rotations: np.ndarray  # (F, G, 4)
    appendage_offsets: np.ndarray  # (F, 3)

    @property
    def n_gaussians(self):
        return self.canonical_positions.shape[0]

    @property
    def frame_count(self):
        return self.positions.shape[0]


def _static_ground_truth(spec, skel, rng):
    child = np.flatnonzero(skel.parents >= 0)
    seg_a = skel.rest_positions[skel.parents[child]]
    seg_b = skel.rest_positions[child]
    nb, na = spec.body_gaussians, spec.appendage_gaussians
    bones = rng.integers(0, len(child), size=nb)
    u = rng.uniform(0.0, 1.0, size=(nb, 1))
    along = seg_a[bones] + u * (seg_b[bones] - seg_a[bones])
    radial = rng.normal(size=(nb, 3))
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    body = along + radial * rng.uniform(0.0, 0.05, size=(nb, 1))
    body_joint = child[np.argmin(_segment_distances(body, seg_a, seg_b), axis=1)]

    app_center = np.array([0.0, 0.18, 0.12])
    appendage = app_center + rng.uniform(-0.07, 0.07, size=(na, 3))
    canonical = np.concatenate([body, appendage])
    joint_index = np.concatenate([body_joint, np.full(na, skel.root)]).astype(np.int32)
    mask = np.zeros(nb + na, dtype=bool)
    mask[nb:] = True
    scales = np.repeat(rng.uniform(0.03, 0.055, size=(nb + na, 1)), 3, axis=1)
    opacities = rng.uniform(0.8, 0.97, size=nb + na)
    colors = rng.uniform(0.2, 0.95, size=(nb + na, 3))
    # distinct warm hue so appendage errors dominate any color confusion
    colors[nb:, 0] = rng.uniform(0.75, 0.95, size=na)
    colors[nb:, 1] = rng.uniform(0.15, 0.30, size=na)
    colors[nb:, 2] = rng.uniform(0.10, 0.25, size=na)
    return canonical, joint_index, mask, scales, opacities, colors


def build_ground_truth(spec, skel, rng):
    canonical, joint_index, mask, scales, opacities, colors = \
        _static_ground_truth(spec, skel, rng)
    g = canonical.shape[0]
    weights = np.zeros((g, skel.joint_count))
    weights[np.arange(g), joint_index] = 1.0
    identity = np.zeros((g, 4))
    identity[:, 0] = 1.0
    positions = np.zeros((spec.frame_count, g, 3))
    rotations = np.zeros((spec.frame_count, g, 4))
    offsets = np.zeros((spec.frame_count, 3))
    for f in range(spec.frame_count):
        jt = forward_kinematics(skel, pose_at(spec, skel, f))
        x, q, _ = warp_gaussians(canonical, identity, weights, jt)
        offsets[f] = appendage_offset(spec, f)
        x = x + offsets[f] * mask[:, None]
        positions[f] = x
        rotations[f] = q
    return GroundTruthTrack(canonical, joint_index, mask, scales, opacities,
                            colors, positions, rotations, offsets)


@dataclass
class SynthDataset:
    spec: SynthSceneSpec
    skeleton: Skeleton
    cameras: list
    poses: list
    images: dict  # (view, frame) -> (H, W, 3) float64
    gt: GroundTruthTrack

    @property
    def frame_count(self):
        return self.spec.frame_count

    @property
    def view_count(self):
        return len(self.cameras)

    def frame_set(self, frame):
        """Ground-truth gaussians of one frame as a renderable set."""
        store = color_store_from_rgb(self.gt.colors, degree=0, dtype=np.float64)
        return PosedGaussianSet(self.gt.positions[frame], self.gt.rotations[frame],
                                self.gt.scales, self.gt.opacities, store)


def generate(spec):
    """Render every (view, frame) pair of the scene. Deterministic per seed."""
    skel = biped_skeleton()
    rng = np.random.default_rng(spec.seed)
    gt = build_ground_truth(spec, skel, rng)
    cameras = camera_ring(spec)
    poses = [pose_at(spec, skel, f) for f in range(spec.frame_count)]
    store = color_store_from_rgb(gt.colors, degree=0, dtype=np.float64)
    images = {}
    for f in range(spec.frame_count):
        gset = PosedGaussianSet(gt.positions[f], gt.rotations[f],
                                gt.scales, gt.opacities, store)
        for v, cam in enumerate(cameras):
            images[(v, f)] = render(gset, cam).rgb
    return SynthDataset(spec, skel, cameras, poses, images, gt)


# --- train/test partition -------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train_frames: tuple
    novel_frames: tuple
    train_views: tuple
    test_views: tuple

    def to_dict(self):
        return {"train_frames": list(self.train_frames),
                "novel_frames": list(self.novel_frames),
                "train_views": list(self.train_views),
                "test_views": list(self.test_views)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train_frames"]), tuple(d["novel_frames"]),
                   tuple(d["train_views"]), tuple(d["test_views"]))


def split(dataset, train_frames, novel_frames, train_views, test_views):
    train_frames = tuple(int(f) for f in train_frames)
    novel_frames = tuple(int(f) for f in novel_frames)
    train_views = tuple(int(v) for v in train_views)
    test_views = tuple(int(v) for v in test_views)
    if not train_frames:
        raise ValueError("train split must contain at least one frame")
    if not train_views:
        raise ValueError("train split must contain at least one view")
    fc, vc = dataset.frame_count, dataset.view_count
    for f in train_frames + novel_frames:
        if not 0 <= f < fc:
            raise ValueError(f"frame {f} outside the dataset range")
    for v in train_views + test_views:
        if not 0 <= v < vc:
            raise ValueError(f"view {v} outside the camera ring")
    return DatasetSplit(train_frames, novel_frames, train_views, test_views)


def default_split(dataset):
    """Two thirds of the frames train, a 2-frame gap, the rest novel;
    the last two cameras are held out."""
    fc, vc = dataset.frame_count, dataset.view_count
    n_train = (2 * fc) // 3
    train_frames = range(n_train)
    novel_frames = range(min(n_train + 2, fc), fc)
    test_views = (vc - 2, vc - 1)
    train_views = tuple(v for v in range(vc) if v not in test_views)
    return split(dataset, train_frames, novel_frames, train_views, test_views)


def training_set(dataset, ds_split):
    """Trainer-facing view of the train partition. Normalized time spans
    exactly the train frames."""
    cameras = {v: dataset.cameras[v] for v in ds_split.train_views}
    poses = {f: dataset.poses[f] for f in ds_split.train_frames}
    images = {(v, f): dataset.images[(v, f)]
              for v in ds_split.train_views for f in ds_split.train_frames}
    frame_count = max(ds_split.train_frames) + 1
    return TrainingSet(cameras, poses, images, frame_count)


# --- disk layout ----------------------------------------------------------------

def save_ground_truth(gt, path):
    with open(path, "wb") as fh:
        fh.write(GT_MAGIC)
        fh.write(struct.pack("<III", GT_VERSION, gt.frame_count, gt.n_gaussians))
        fh.write(np.ascontiguousarray(gt.joint_index, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(gt.appendage_mask, dtype="u1").tobytes())
        for arr in (gt.canonical_positions, gt.scales, gt.opacities, gt.colors,
                    gt.appendage_offsets, gt.positions, gt.rotations):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_ground_truth(path):
    blob = Path(path).read_bytes()
    if blob[:4] != GT_MAGIC:
        raise ValueError("not a ground-truth gaussian track")
    version, f, g = struct.unpack_from("<III", blob, 4)
    if version != GT_VERSION:
        raise ValueError(f"unsupported ground-truth version {version}")
    off = 16

    def take(dtype, shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
        off += arr.nbytes
        return arr.reshape(shape).copy()

    joint_index = take("<i4", (g,))
    mask = take("u1", (g,)).astype(bool)
    canonical = take("<f8", (g, 3))
    scales = take("<f8", (g, 3))
    opacities = take("<f8", (g,))
    colors = take("<f8", (g, 3))
    offsets = take("<f8", (f, 3))
    positions = take("<f8", (f, g, 3))
    rotations = take("<f8", (f, g, 4))
    if off != len(blob):
        raise ValueError("ground-truth track has trailing bytes")
    return GroundTruthTrack(canonical, joint_index, mask, scales, opacities,
                            colors, positions, rotations, offsets)


def save_dataset(dataset, outdir):
    """Write the documented directory layout, split manifest included."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "cameras.json", "w") as fh:
        json.dump({"cameras": [c.to_dict() for c in dataset.cameras]}, fh, indent=2)
    save_skeleton(dataset.skeleton, outdir / "skeleton.json")
    save_pose_track(dataset.poses, outdir / "poses.csv")
    with open(outdir / "spec.json", "w") as fh:
        json.dump(dataset.spec.to_dict(), fh, indent=2)
    with open(outdir / "split.json", "w") as fh:
        json.dump(default_split(dataset).to_dict(), fh, indent=2)
    save_ground_truth(dataset.gt, outdir / "gt_gaussians.bin")
    for (v, f), img in sorted(dataset.images.items()):
        view_dir = outdir / "images" / f"view{v}"
        view_dir.mkdir(parents=True, exist_ok=True)
        save_png(img, view_dir / f"frame{f}.png")


def load_dataset(indir):
    """Load a saved dataset; images come back 8-bit quantized."""
    indir = Path(indir)
    for name in ("cameras.json", "skeleton.json", "poses.csv",
                 "spec.json", "gt_gaussians.bin"):
        if not (indir / name).exists():
            raise ValueError(f"dataset is missing {name}")
    with open(indir / "cameras.json") as fh:
        cameras = [Camera.from_dict(d) for d in json.load(fh)["cameras"]]
    skeleton = load_skeleton(indir / "skeleton.json")
    poses = load_pose_track(indir / "poses.csv")
    with open(indir / "spec.json") as fh:
        spec = SynthSceneSpec.from_dict(json.load(fh))
    gt = load_ground_truth(indir / "gt_gaussians.bin")
    images = {}
    for v in range(len(cameras)):
        for f in range(len(poses)):
            path = indir / "images" / f"view{v}" / f"frame{f}.png"
            if not path.exists():
                raise ValueError(f"dataset is missing {path.name} for view {v}")
            images[(v, f)] = load_png(path)
    return SynthDataset(spec, skeleton, cameras, poses, images, gt)


def load_split(indir):
    path = Path(indir) / "split.json"
    if not path.exists():
        raise ValueError("dataset is missing split.json")
    with open(path) as fh:
        return DatasetSplit.from_dict(json.load(fh))
