"""Forward kinematics and linear blend skinning.

A gaussian lives at a canonical position x_c.  Each animation frame supplies
per-joint local rotations; forward kinematics turns those into per-joint
world transforms T_k that carry rest-pose space into posed space.  The warp
applied to a gaussian is the weight-blended transform

    T = sum_k w_k T_k,

with weights produced by a softmax over per-gaussian base logits plus a
residual logit field evaluated at x_c.  Because the blended linear part is
not itself a rotation, gaussian orientations are re-orthonormalized through
a polar decomposition after blending.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .mlp import Mlp, init_mlp, mlp_backward, mlp_forward
from .rasterizer import PosedGaussianSet
from .rotations import (
    axis_angle_to_matrix,
    matrix_to_quat,
    matrix_to_quat_vjp,
    polar_rotation,
    polar_rotation_vjp,
    quat_to_matrix,
    quat_to_matrix_vjp,
)

PART_LABELS = ("cb", "ll", "la", "rl", "ra")
DEGENERATE_DET = 1e-9


@dataclass
class Skeleton:
    """Joint tree with rest-pose positions and body-part labels."""

    names: list
    parents: np.ndarray
    rest_positions: np.ndarray
    part_labels: list
    topo_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = len(self.names)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        if self.parents.shape != (k,) or self.rest_positions.shape != (k, 3):
            raise ValueError("skeleton field shapes disagree")
        if len(self.part_labels) != k:
            raise ValueError("skeleton field shapes disagree")
        for label in self.part_labels:
            if label not in PART_LABELS:
                raise ValueError(f"unknown part label {label!r}")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1:
            raise ValueError("skeleton must have exactly one root")
        if np.any(self.parents >= k):
            raise ValueError("parent index out of range")
        # Children after parents; also proves the graph is a tree.
        order = [int(roots[0])]
        placed = {int(roots[0])}
        while len(order) < k:
            grew = False
            for j in range(k):
                if j not in placed and int(self.parents[j]) in placed:
                    order.append(j)
                    placed.add(j)
                    grew = True
            if not grew:
                raise ValueError("skeleton contains a cycle or orphan joint")
        self.topo_order = np.asarray(order, dtype=np.int64)

    @property
    def joint_count(self):
        return len(self.names)

    @property
    def root(self):
        return int(self.topo_order[0])

    def to_dict(self):
        joints = []
        for j in range(self.joint_count):
            p = int(self.parents[j])
            joints.append({
                "name": self.names[j],
                "parent": self.names[p] if p >= 0 else None,
                "rest_position": [float(v) for v in self.rest_positions[j]],
                "part": self.part_labels[j],
            })
        return {"joints": joints}

    @classmethod
    def from_dict(cls, data):
        joints = data["joints"]
        names = [j["name"] for j in joints]
        index = {n: i for i, n in enumerate(names)}
        if len(index) != len(names):
            raise ValueError("duplicate joint names")
        parents = []
        for j in joints:
            p = j["parent"]
            if p is None:
                parents.append(-1)
            elif isinstance(p, str):
                if p not in index:
                    raise ValueError(f"unknown parent joint {p!r}")
                parents.append(index[p])
            else:
                parents.append(int(p))
        rest = [j["rest_position"] for j in joints]
        parts = [j["part"] for j in joints]
        return cls(names, np.asarray(parents), np.asarray(rest, dtype=np.float64), parts)


def load_skeleton(path):
    with open(path, "r", encoding="utf-8") as fh:
        return Skeleton.from_dict(json.load(fh))


def save_skeleton(skel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(skel.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass
class Pose:
    """Per-joint local rotations (axis-angle, radians) plus root translation."""

    thetas: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.thetas.ndim != 2 or self.thetas.shape[1] != 3:
            raise ValueError("thetas must be (K, 3)")
        if self.root_translation.shape != (3,):
            raise ValueError("root translation must be a 3-vector")
        if not (np.all(np.isfinite(self.thetas))
                and np.all(np.isfinite(self.root_translation))):
            raise ValueError("pose entries must be finite")

    @property
    def joint_count(self):
        return self.thetas.shape[0]


def save_pose_track(poses, path):
    """One row per frame: frame index, root translation, K axis-angle triples."""
    if not poses:
        raise ValueError("empty pose track")
    k = poses[0].joint_count
    header = ["frame", "tx", "ty", "tz"]
    for j in range(k):
        header += [f"j{j}x", f"j{j}y", f"j{j}z"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, pose in enumerate(poses):
            row = [i] + [repr(float(v)) for v in pose.root_translation]
            row += [repr(float(v)) for v in pose.thetas.reshape(-1)]
            writer.writerow(row)


def load_pose_track(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["frame", "tx", "ty", "tz"] or (len(header) - 4) % 3:
            raise ValueError("malformed pose track header")
        k = (len(header) - 4) // 3
        poses = []
        for row in reader:
            vals = np.asarray([float(v) for v in row[1:]], dtype=np.float64)
            poses.append(Pose(vals[3:].reshape(k, 3), vals[:3]))
    return poses


@dataclass
class JointTransforms:
    """Per-joint rest-to-posed rigid transforms."""

    rotations: np.ndarray
    translations: np.ndarray
    matrices: np.ndarray
    posed_positions: np.ndarray

    def __post_init__(self):
        k = self.rotations.shape[0]
        if (self.rotations.shape != (k, 3, 3) or self.translations.shape != (k, 3)
                or self.matrices.shape != (k, 4, 4)
                or self.posed_positions.shape != (k, 3)):
            raise ValueError("joint transform shapes disagree")
        rtr = np.einsum("kij,kil->kjl", self.rotations, self.rotations)
        if np.max(np.abs(rtr - np.eye(3))) > 1e-5:
            raise ValueError("joint rotations must be orthonormal")
        if np.any(np.linalg.det(self.rotations) < 0.0):
            raise ValueError("joint rotations must have determinant +1")

    @property
    def joint_count(self):
        return self.rotations.shape[0]


def identity_transforms(joint_count, rest_positions=None):
    rot = np.tile(np.eye(3), (joint_count, 1, 1))
    tra = np.zeros((joint_count, 3))
    mat = np.tile(np.eye(4), (joint_count, 1, 1))
    posed = np.zeros((joint_count, 3)) if rest_positions is None else np.asarray(
        rest_positions, dtype=np.float64).copy()
    return JointTransforms(rot, tra, mat, posed)


def forward_kinematics(skel, pose):
    """Compose local joint rotations root-to-leaf into rest-to-posed transforms.

    T_k carries rest-pose coordinates into posed coordinates and maps each
    rest joint position onto its posed position exactly.
    """
    k = skel.joint_count
    if pose.joint_count != k:
        raise ValueError("pose joint count does not match skeleton")
    local = axis_angle_to_matrix(pose.thetas)
    world_rot = np.zeros((k, 3, 3))
    posed = np.zeros((k, 3))
    for j in skel.topo_order:
        p = int(skel.parents[j])
        if p < 0:
            world_rot[j] = local[j]
            posed[j] = skel.rest_positions[j] + pose.root_translation
        else:
            world_rot[j] = world_rot[p] @ local[j]
            posed[j] = posed[p] + world_rot[p] @ (
                skel.rest_positions[j] - skel.rest_positions[p])
    translations = posed - np.einsum("kij,kj->ki", world_rot, skel.rest_positions)
    matrices = np.tile(np.eye(4), (k, 1, 1))
    matrices[:, :3, :3] = world_rot
    matrices[:, :3, 3] = translations
    return JointTransforms(world_rot, translations, matrices, posed)


# --- blend weight field -----------------------------------------------------

@dataclass
class BlendWeightField:
    """Per-gaussian base logits plus a residual logit network over position."""

    base_logits: np.ndarray
    net: Mlp

    def __post_init__(self):
        if self.base_logits.ndim != 2:
            raise ValueError("base logits must be (N, K)")
        if self.net.out_dim != self.base_logits.shape[1]:
            raise ValueError("network output must match joint count")
        if self.net.in_dim != 3:
            raise ValueError("network input must be a 3-vector position")

    @property
    def gaussian_count(self):
        return self.base_logits.shape[0]

    @property
    def joint_count(self):
        return self.base_logits.shape[1]

    def keep(self, idx):
        return BlendWeightField(self.base_logits[idx].copy(), self.net)


def _segment_distances(points, seg_a, seg_b):
    """Distances from points (N,3) to segments a->b (B,3 each), (N,B)."""
    d = seg_b[None, :, :] - seg_a[None, :, :]
    w = points[:, None, :] - seg_a[None, :, :]
    seg_len2 = np.maximum(np.sum(d * d, axis=-1), 1e-18)
    t = np.clip(np.sum(w * d, axis=-1) / seg_len2, 0.0, 1.0)
    closest = seg_a[None, :, :] + t[:, :, None] * d
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def bone_distance_logits(skel, points, n_nearest=4, eps=1e-6, floor=-18.0):
    """Inverse-distance weights over the nearest rest-pose bone segments,
    expressed as logits so a softmax reproduces them."""
    points = np.asarray(points, dtype=np.float64)
    child = np.flatnonzero(skel.parents >= 0)
    seg_a = skel.rest_positions[skel.parents[child]]
    seg_b = skel.rest_positions[child]
    dist = _segment_distances(points, seg_a, seg_b)
    n, b = dist.shape
    take = min(n_nearest, b)
    logits = np.full((n, skel.joint_count), floor)
    near = np.argsort(dist, axis=1, kind="stable")[:, :take]
    inv = 1.0 / (np.take_along_axis(dist, near, axis=1) + eps)
    inv /= np.sum(inv, axis=1, keepdims=True)
    rows = np.repeat(np.arange(n), take)
    joints = child[near.reshape(-1)]
    logits[rows, joints] = np.log(np.maximum(inv.reshape(-1), 1e-8))
    return logits


def init_blend_field(skel, canonical_positions, rng, hidden_layers=4, width=128):
    """Base logits from bone-distance weighting; residual net starts at zero."""
    base = bone_distance_logits(skel, canonical_positions).astype(np.float32)
    net = init_mlp(3, skel.joint_count, hidden_layers, width, rng, final_zero=True)
    return BlendWeightField(base, net)


def _softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def blend_weights_batch(field, xs, cache=None):
    """Softmax(base_logits + net(x)) per gaussian; rows align with logits."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[0] != field.gaussian_count:
        raise ValueError("position count does not match base logit rows")
    mlp_cache = [] if cache is not None else None
    residual = mlp_forward(field.net, xs, cache=mlp_cache)
    weights = _softmax(field.base_logits.astype(np.float64) + residual)
    if cache is not None:
        cache["mlp"] = mlp_cache
        cache["weights"] = weights
    return weights


def blend_weights(field, x_c, gaussian_index):
    if not 0 <= gaussian_index < field.gaussian_count:
        raise IndexError("gaussian index out of range")
    xs = np.asarray(x_c, dtype=np.float64)[None, :]
    residual = mlp_forward(field.net, xs)
    logits = field.base_logits[gaussian_index].astype(np.float64) + residual[0]
    return _softmax(logits)


def blend_weights_backward(field, cache, d_weights):
    """Gradients of the softmax blend: base logits, net params, positions."""
    w = cache["weights"]
    inner = np.sum(d_weights * w, axis=-1, keepdims=True)
    d_logits = w * (d_weights - inner)
    d_xs, d_w, d_b = mlp_backward(field.net, cache["mlp"], d_logits)
    return d_logits, d_w, d_b, d_xs


# --- warping ----------------------------------------------------------------

def warp_gaussians(x_c, q_c, weights, jt, cache=None):
    """Blend joint transforms per gaussian and apply to position/orientation.

    Returns posed positions, posed unit quaternions, and a per-gaussian flag
    marking gaussians whose blended linear map collapsed (|det| below 1e-9);
    those keep an identity orientation.
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    q_c = np.asarray(q_c, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = x_c.shape[0]
    if q_c.shape != (n, 4) or weights.shape != (n, jt.joint_count):
        raise ValueError("warp input shapes disagree")
    lin = np.einsum("nk,kij->nij", weights, jt.rotations)
    shift = weights @ jt.translations
    x_o = np.einsum("nij,nj->ni", lin, x_c) + shift
    degenerate = np.abs(np.linalg.det(lin)) < DEGENERATE_DET
    r_c = quat_to_matrix(q_c)
    blended = lin @ r_c
    safe = blended.copy()
    safe[degenerate] = np.eye(3)
    nearest = polar_rotation(safe)
    q_o = matrix_to_quat(nearest)
    q_o[degenerate] = np.array([1.0, 0.0, 0.0, 0.0])
    if cache is not None:
        cache.update(x_c=x_c, q_c=q_c, weights=weights, jt=jt, lin=lin,
                     r_c=r_c, safe=safe, nearest=nearest, degenerate=degenerate)
    return x_o, q_o, degenerate


def warp_backward(cache, d_x_o, d_q_o):
    """Backward pass of warp_gaussians for positions, quaternions, weights."""
    jt = cache["jt"]
    lin, r_c = cache["lin"], cache["r_c"]
    degenerate = cache["degenerate"]
    d_x_o = np.asarray(d_x_o, dtype=np.float64)
    d_q_o = np.asarray(d_q_o, dtype=np.float64).copy()
    d_q_o[degenerate] = 0.0

    d_x_c = np.einsum("nij,ni->nj", lin, d_x_o)
    d_weights = d_x_o @ jt.translations.T
    d_lin = np.einsum("ni,nj->nij", d_x_o, cache["x_c"])

    d_nearest = matrix_to_quat_vjp(cache["nearest"], d_q_o)
    d_blended = polar_rotation_vjp(cache["safe"], cache["nearest"], d_nearest)
    d_blended[degenerate] = 0.0
    d_lin += np.einsum("nij,nkj->nik", d_blended, r_c)
    d_r_c = np.einsum("nji,njk->nik", lin, d_blended)
    d_q_c = quat_to_matrix_vjp(cache["q_c"], d_r_c)

    d_weights += np.einsum("nij,kij->nk", d_lin, jt.rotations)
    return d_x_c, d_q_c, d_weights


def warp_to_observation(x_c, q_c, scales, opacities, colors, weights, jt,
                        part_labels=None):
    """Full warp producing a renderable gaussian set; scale, opacity and
    color coefficients pass through unchanged."""
    x_o, q_o, degenerate = warp_gaussians(x_c, q_c, weights, jt)
    return PosedGaussianSet(x_o, q_o, np.asarray(scales, dtype=np.float64),
                            np.asarray(opacities, dtype=np.float64), colors,
                            part_labels=part_labels, degenerate=degenerate)


def assign_gaussian_parts(weights, skel):
    """Label each gaussian by the part of its strongest joint; ties take the
    lowest joint index."""
    weights = np.asarray(weights, dtype=np.float64)
    best = np.argmax(weights, axis=-1)
    return [skel.part_labels[int(j)] for j in best]
