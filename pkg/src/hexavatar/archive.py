"""Single-file avatar container.

Layout: magic "R3AV", u32 version, u32 section count, then tagged
sections ([4-byte tag][u64 payload length][payload], little-endian
throughout). Unknown tags are a hard error, never silently skipped.

Sections: R3CB codebook, R3GD decoder, R3SH color store, R3XC base
positions (u32 count + float32 triples, as documented), R3BW blend
weight field, R3OB per-gaussian opacity bias, R3SK skeleton JSON,
R3MD bbox / time range / count metadata, R3OS optional optimizer state,
R3PT optional recorded pose track (what retrieval searches over).
"""

import json
import struct

import numpy as np

from .avatar import CanonicalAvatar
from .decoder import DecoderNetwork
from .hexplane import PLANE_AXES, FeaturePlane, HexPlaneCodebook
from .mlp import Mlp
from .sh import GaussianColorStore
from .skinning import BlendWeightField, Pose, Skeleton
from .trainer import AdamMoments

MAGIC = b"R3AV"
VERSION = 1
KNOWN_TAGS = (b"R3CB", b"R3GD", b"R3SH", b"R3XC", b"R3BW",
              b"R3OB", b"R3SK", b"R3MD", b"R3OS", b"R3PT")
REQUIRED_TAGS = KNOWN_TAGS[:8]

_DTYPES = ("<f4", "<f8", "<i4", "<i8", "u1")


def _pack_array(arr):
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = None
    for i, name in enumerate(_DTYPES):
        if dtype == np.dtype(name):
            code = i
            break
    if code is None:
        raise ValueError(f"unsupported array dtype {arr.dtype}")
    head = struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.blob):
            raise ValueError("archive section is truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def array(self):
        code, ndim = struct.unpack("<BB", self.take(2))
        if code >= len(_DTYPES):
            raise ValueError("unknown array dtype code")
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(n * dtype.itemsize), dtype=dtype)
        return arr.reshape(shape).copy()

    def done(self):
        if self.off != len(self.blob):
            raise ValueError("archive section has trailing bytes")


def _mlp_bytes(net):
    out = [struct.pack("<I", len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        out.append(_pack_array(w))
        out.append(_pack_array(b))
    return b"".join(out)


def _read_mlp(r):
    n = r.u32()
    weights, biases = [], []
    for _ in range(n):
        weights.append(r.array())
        biases.append(r.array())
    return Mlp(weights, biases)


def _codebook_bytes(cb):
    out = [struct.pack("<I", cb.n_scales), _pack_array(cb.bbox)]
    for planes in cb.scales:
        out.append(struct.pack("<I", len(planes)))
        for plane in planes:
            out.append(struct.pack("<B", PLANE_AXES.index(plane.axis_pair)))
            out.append(_pack_array(plane.data))
    return b"".join(out)


def _read_codebook(r):
    n_scales = r.u32()
    bbox = r.array()
    scales = []
    for _ in range(n_scales):
        planes = []
        for _ in range(r.u32()):
            axis = PLANE_AXES[struct.unpack("<B", r.take(1))[0]]
            planes.append(FeaturePlane(axis, r.array()))
        scales.append(planes)
    return HexPlaneCodebook(bbox, scales)


def _positions_bytes(positions):
    # format pins base positions to float32 triples
    pos = np.ascontiguousarray(positions, dtype="<f4")
    return struct.pack("<I", pos.shape[0]) + pos.tobytes()


def _read_positions(r):
    count = r.u32()
    arr = np.frombuffer(r.take(count * 12), dtype="<f4").reshape(count, 3)
    return arr.copy()


def _optimizer_bytes(opt):
    out = [struct.pack("<ddd", opt.beta1, opt.beta2, opt.eps),
           struct.pack("<I", len(opt.slots))]
    for name in sorted(opt.slots):
        m, v, step = opt.slots[name]
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<Q", step))
        out.append(_pack_array(m))
        out.append(_pack_array(v))
    return b"".join(out)


def _pose_track_bytes(poses):
    thetas = np.stack([p.thetas for p in poses])
    roots = np.stack([p.root_translation for p in poses])
    return _pack_array(thetas) + _pack_array(roots)


def _read_pose_track(r):
    thetas = r.array()
    roots = r.array()
    if thetas.shape[0] != roots.shape[0]:
        raise ValueError("pose track section shapes disagree")
    return [Pose(t, rt) for t, rt in zip(thetas, roots)]


def _read_optimizer(r):
    beta1, beta2, eps = struct.unpack("<ddd", r.take(24))
    opt = AdamMoments(beta1=beta1, beta2=beta2, eps=eps)
    for _ in range(r.u32()):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        step = struct.unpack("<Q", r.take(8))[0]
        m = r.array()
        v = r.array()
        opt.slots[name] = [m, v, step]
    return opt


def save_avatar(avatar, path, optimizer=None, poses=None):
    """Write the avatar (plus optional optimizer state and recorded pose
    track) as one archive."""
    meta = {
        "gaussian_count": int(avatar.n_gaussians),
        "frame_count": int(avatar.frame_count),
        "conditioning": avatar.conditioning,
        "bbox": np.asarray(avatar.bbox).tolist(),
        "time_range": [0.0, 1.0],
        "sh_degree": int(avatar.colors.degree),
    }
    dec = avatar.decoder
    sections = [
        (b"R3CB", _codebook_bytes(avatar.codebook)),
        (b"R3GD", struct.pack("<dd", dec.max_offset, dec.max_scale)
         + _mlp_bytes(dec.net)),
        (b"R3SH", struct.pack("<I", avatar.colors.degree)
         + _pack_array(avatar.colors.coeffs)),
        (b"R3XC", _positions_bytes(avatar.positions)),
        (b"R3BW", _pack_array(avatar.blend_field.base_logits)
         + _mlp_bytes(avatar.blend_field.net)),
        (b"R3OB", _pack_array(avatar.opacity_bias)),
        (b"R3SK", json.dumps(avatar.skeleton.to_dict(), sort_keys=True).encode()),
        (b"R3MD", json.dumps(meta, sort_keys=True).encode()),
    ]
    if optimizer is not None:
        sections.append((b"R3OS", _optimizer_bytes(optimizer)))
    if poses is not None:
        sections.append((b"R3PT", _pose_track_bytes(poses)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for tag, payload in sections:
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _scan_sections(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError("not an avatar archive")
    version, n_sections = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported archive version {version}")
    off = 12
    sections = {}
    for _ in range(n_sections):
        if off + 12 > len(blob):
            raise ValueError("archive is truncated")
        tag = blob[off:off + 4]
        length = struct.unpack_from("<Q", blob, off + 4)[0]
        off += 12
        if tag not in KNOWN_TAGS:
            raise ValueError(f"unknown archive section {tag!r}")
        if tag in sections:
            raise ValueError(f"duplicate archive section {tag!r}")
        if off + length > len(blob):
            raise ValueError("archive is truncated")
        sections[tag] = blob[off:off + length]
        off += length
    if off != len(blob):
        raise ValueError("archive has trailing bytes")
    missing = [t for t in REQUIRED_TAGS if t not in sections]
    if missing:
        raise ValueError(f"archive is missing sections {missing}")
    return sections


def load_avatar(path):
    """Read an archive back to (avatar, optimizer or None)."""
    sections = _scan_sections(path)
    codebook = _reader_done(_Reader(sections[b"R3CB"]), _read_codebook)
    r = _Reader(sections[b"R3GD"])
    max_offset, max_scale = struct.unpack("<dd", r.take(16))
    decoder = DecoderNetwork(_read_mlp(r), max_offset=max_offset,
                             max_scale=max_scale)
    r.done()
    r = _Reader(sections[b"R3SH"])
    degree = r.u32()
    colors = GaussianColorStore(r.array(), degree)
    r.done()
    positions = _reader_done(_Reader(sections[b"R3XC"]), _read_positions)
    r = _Reader(sections[b"R3BW"])
    base_logits = r.array()
    blend = BlendWeightField(base_logits, _read_mlp(r))
    r.done()
    opacity_bias = _reader_done(_Reader(sections[b"R3OB"]), _Reader.array)
    skeleton = Skeleton.from_dict(json.loads(sections[b"R3SK"].decode()))
    meta = json.loads(sections[b"R3MD"].decode())
    counts = {meta["gaussian_count"], positions.shape[0],
              colors.coeffs.shape[0], base_logits.shape[0],
              opacity_bias.shape[0]}
    if len(counts) != 1:
        raise ValueError("archive per-gaussian section counts disagree")
    avatar = CanonicalAvatar(
        skeleton=skeleton, codebook=codebook, decoder=decoder, colors=colors,
        blend_field=blend, positions=positions, opacity_bias=opacity_bias,
        frame_count=int(meta["frame_count"]),
        conditioning=meta["conditioning"])
    optimizer = None
    if b"R3OS" in sections:
        optimizer = _reader_done(_Reader(sections[b"R3OS"]), _read_optimizer)
    return avatar, optimizer


def load_poses(path):
    """Recorded pose track from an archive, or None when absent."""
    sections = _scan_sections(path)
    if b"R3PT" not in sections:
        return None
    return _reader_done(_Reader(sections[b"R3PT"]), _read_pose_track)


def _reader_done(r, fn):
    out = fn(r)
    r.done()
    return out
