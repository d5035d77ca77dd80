"""Pose-sequence retrieval: novel pose streams to codebook timestamps.

Each training frame i (from 2 on) contributes, per body part, a flattened
vector {dp_{i-1}, dp_i, p_i} built from per-joint relative rotation
log-maps and the part's absolute joint angles.  A novel frame queries the
same construction; the nearest entries by L2 distance, filtered through a
sliding window around the previously retrieved timestamp, yield a
real-valued timestamp per part.  An empty window falls back to the global
best and records a temporal jitter, later smoothed by averaging the
features of the neighboring retrieved timestamps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import hexplane as hx
from .avatar import avatar_forward, avatar_parts, frame_to_time
from .rasterizer import render
from .rotations import relative_rotation_log
from .skinning import PART_LABELS

DEFAULT_TOP_K = 20
DEFAULT_WINDOW = 3.0


@dataclass
class PartSequences:
    """All training sequence vectors of one body part."""

    joints: np.ndarray
    timestamps: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[0] != self.timestamps.shape[0]:
            raise ValueError("entry counts disagree")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("sequence vectors must be finite")


@dataclass
class PoseSequenceIndex:
    parts: dict
    frame_count: int

    @property
    def part_names(self):
        return [p for p in PART_LABELS if p in self.parts]


def part_joint_map(skel):
    """Part label to ascending joint indices, only for populated parts."""
    out = {}
    for label in PART_LABELS:
        joints = [j for j in range(skel.joint_count) if skel.part_labels[j] == label]
        if joints:
            out[label] = np.asarray(joints, dtype=np.int64)
    return out


def _track_deltas(thetas):
    """deltas[i] = per-joint relative rotation log between frames i-1 and i."""
    deltas = np.zeros_like(thetas)
    if thetas.shape[0] > 1:
        flat = relative_rotation_log(thetas[:-1].reshape(-1, 3),
                                     thetas[1:].reshape(-1, 3))
        deltas[1:] = flat.reshape(thetas.shape[0] - 1, -1, 3)
    return deltas


def _sequence_vector(thetas, deltas, i, joints):
    return np.concatenate([
        deltas[i - 1][joints].reshape(-1),
        deltas[i][joints].reshape(-1),
        thetas[i][joints].reshape(-1),
    ])


def build_index(poses, skel):
    """Index every training frame from 2 on; root translation plays no part."""
    t_count = len(poses)
    if t_count < 3:
        raise ValueError("need at least 3 training frames to build the index")
    thetas = np.stack([p.thetas for p in poses])
    deltas = _track_deltas(thetas)
    parts = {}
    for label, joints in part_joint_map(skel).items():
        vectors = np.stack([
            _sequence_vector(thetas, deltas, i, joints) for i in range(2, t_count)
        ])
        parts[label] = PartSequences(joints, np.arange(2, t_count), vectors)
    return PoseSequenceIndex(parts, t_count)


def query_vectors(index, poses, frame):
    """Per-part query vectors for a novel frame (needs two frames of history)."""
    if frame < 2 or frame >= len(poses):
        raise ValueError("query frame needs two preceding frames")
    window = np.stack([poses[frame - 2].thetas, poses[frame - 1].thetas,
                       poses[frame].thetas])
    deltas = _track_deltas(window)
    return {
        label: _sequence_vector(window, deltas, 2, seq.joints)
        for label, seq in index.parts.items()
    }


@dataclass
class RetrievalState:
    """Streaming state: per-part history plus the jitter log."""

    k: int = DEFAULT_TOP_K
    window: float = DEFAULT_WINDOW
    t_h: dict = field(default_factory=dict)
    jitters: list = field(default_factory=list)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("top-k size must be at least 2")
        if self.window < 1:
            raise ValueError("window must be at least 1")


def retrieve_timestamp(index, state, query, part, frame=None):
    """One retrieval step for one part; returns (timestamp, jitter flag)."""
    if part not in index.parts:
        raise ValueError(f"no index entries for part {part!r}")
    seq = index.parts[part]
    if seq.vectors.shape[0] == 0:
        raise ValueError("empty index")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (seq.vectors.shape[1],):
        raise ValueError("query vector has the wrong dimension")
    d = np.linalg.norm(seq.vectors - query[None, :], axis=1)
    order = np.lexsort((seq.timestamps, d))
    topk = order[: min(state.k, len(order))]

    previous = state.t_h.get(part)
    if previous is None:
        t = float(seq.timestamps[topk[0]])
        state.t_h[part] = t
        return t, False

    valid = topk[np.abs(seq.timestamps[topk] - previous) < state.window]
    if len(valid) >= 2:
        t1, t2 = float(seq.timestamps[valid[0]]), float(seq.timestamps[valid[1]])
        d1, d2 = float(d[valid[0]]), float(d[valid[1]])
        if d1 + d2 < 1e-12:
            t = t1
        else:
            t = (d2 / (d1 + d2)) * t1 + (d1 / (d1 + d2)) * t2
        state.t_h[part] = t
        return t, False
    if len(valid) == 1:
        t = float(seq.timestamps[valid[0]])
        state.t_h[part] = t
        return t, False
    t = float(seq.timestamps[topk[0]])
    state.t_h[part] = t
    state.jitters.append((frame, part))
    return t, True


@dataclass
class TraceRow:
    frame: int
    part: str
    timestamp: float
    jitter: bool
    t_before: float | None = None
    t_after: float | None = None


@dataclass
class RetrievalTrace:
    rows: list

    def for_frame(self, frame):
        return {r.part: r for r in self.rows if r.frame == frame}

    def frames(self):
        seen = []
        for r in self.rows:
            if r.frame not in seen:
                seen.append(r.frame)
        return seen

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "part", "timestamp", "jitter",
                             "t_before", "t_after"])
            for r in self.rows:
                writer.writerow([
                    r.frame, r.part, repr(r.timestamp), int(r.jitter),
                    "" if r.t_before is None else repr(r.t_before),
                    "" if r.t_after is None else repr(r.t_after),
                ])

    @classmethod
    def load(cls, path):
        rows = []
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["frame", "part", "timestamp", "jitter",
                          "t_before", "t_after"]:
                raise ValueError("malformed trace header")
            for rec in reader:
                rows.append(TraceRow(
                    int(rec[0]), rec[1], float(rec[2]), bool(int(rec[3])),
                    float(rec[4]) if rec[4] else None,
                    float(rec[5]) if rec[5] else None,
                ))
        return cls(rows)


def retrieve_track(index, novel_poses, k=DEFAULT_TOP_K, window=DEFAULT_WINDOW):
    """Stream retrieval over a novel track, then mark smoothing pairs.

    A jitter-flagged row smooths between the same part's retrieved
    timestamps one output frame before and after; at the track boundary the
    single existing neighbor is used twice.
    """
    if len(novel_poses) < 3:
        raise ValueError("novel track needs at least 3 frames")
    state = RetrievalState(k=k, window=window)
    rows = []
    for n in range(2, len(novel_poses)):
        queries = query_vectors(index, novel_poses, n)
        for part in index.part_names:
            t, jit = retrieve_timestamp(index, state, queries[part], part, frame=n)
            rows.append(TraceRow(n, part, t, jit))
    by_part = {}
    for i, row in enumerate(rows):
        by_part.setdefault(row.part, []).append(i)
    for part, idxs in by_part.items():
        for pos, i in enumerate(idxs):
            if not rows[i].jitter:
                continue
            before = rows[idxs[pos - 1]].timestamp if pos > 0 else None
            after = rows[idxs[pos + 1]].timestamp if pos + 1 < len(idxs) else None
            if before is None and after is None:
                before = after = rows[i].timestamp
            elif before is None:
                before = after
            elif after is None:
                after = before
            rows[i].t_before = before
            rows[i].t_after = after
    return RetrievalTrace(rows)


def animate(avatar, index, novel_poses, cam, k=DEFAULT_TOP_K,
            window=DEFAULT_WINDOW, background=(0.0, 0.0, 0.0), smoothing=True):
    """Render the novel track with per-part retrieved timestamps.

    Returns (images, trace).  Each gaussian is encoded at its part's
    normalized timestamp; jitter-flagged parts use the mean of the features
    at the smoothing pair instead (unless smoothing is disabled).
    """
    if avatar.conditioning != "time":
        raise ValueError("animation needs a time-conditioned avatar")
    trace = retrieve_track(index, novel_poses, k=k, window=window)
    labels = np.asarray(avatar_parts(avatar))
    base = avatar.positions.astype(np.float64)
    images = []
    for n in trace.frames():
        frame_rows = trace.for_frame(n)
        features = np.zeros((avatar.n_gaussians, avatar.codebook.feature_dim))
        for part, row in frame_rows.items():
            mask = labels == part
            if not np.any(mask):
                continue
            if row.jitter and smoothing:
                features[mask] = hx.encode_smoothed_batch(
                    avatar.codebook, base[mask],
                    frame_to_time(row.t_before, avatar.frame_count),
                    frame_to_time(row.t_after, avatar.frame_count))
            else:
                features[mask] = hx.encode_batch(
                    avatar.codebook, base[mask],
                    frame_to_time(row.timestamp, avatar.frame_count))
        gset = avatar_forward(avatar, novel_poses[n], features=features)
        images.append(render(gset, cam, background=background))
    return images, trace
