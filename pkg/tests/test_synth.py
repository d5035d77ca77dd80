import numpy as np
import pytest

from hexavatar import synth
from hexavatar.rasterizer import psnr
from hexavatar.skinning import forward_kinematics


def small_spec(**kw):
    base = dict(frame_count=30, image_size=24, camera_count=4,
                body_gaussians=40, appendage_gaussians=8, seed=3)
    base.update(kw)
    return synth.SynthSceneSpec(**base)


def test_biped_covers_all_parts():
    skel = synth.biped_skeleton()
    assert skel.joint_count == 9
    assert set(skel.part_labels) == {"cb", "ll", "la", "rl", "ra"}
    jt = forward_kinematics(skel, synth.pose_at(small_spec(motion_amplitude=0.0),
                                                skel, 0))
    assert np.allclose(jt.posed_positions, skel.rest_positions, atol=1e-12)


def test_pose_period_is_bitwise():
    spec = small_spec()
    skel = synth.biped_skeleton()
    for f in range(5):
        a = synth.pose_at(spec, skel, f)
        b = synth.pose_at(spec, skel, f + spec.pose_period)
        assert np.array_equal(a.thetas, b.thetas)
    assert not np.array_equal(synth.pose_at(spec, skel, 0).thetas,
                              synth.pose_at(spec, skel, 3).thetas)


def test_appendage_period_differs_from_pose_period():
    spec = small_spec()
    assert np.array_equal(synth.appendage_offset(spec, 4),
                          synth.appendage_offset(spec, 4 + spec.appendage_period))
    assert not np.array_equal(synth.appendage_offset(spec, 4),
                              synth.appendage_offset(spec, 4 + spec.pose_period))


def test_zero_amplitude_renders_identically():
    spec = small_spec(frame_count=10, motion_amplitude=0.0,
                      appendage_amplitude=0.0)
    ds = synth.generate(spec)
    for v in range(spec.camera_count):
        base = ds.images[(v, 0)]
        for f in range(1, spec.frame_count):
            assert np.array_equal(ds.images[(v, f)], base)


def test_image_count():
    spec = small_spec(frame_count=10, camera_count=4)
    ds = synth.generate(spec)
    assert len(ds.images) == 40
    assert all(img.shape == (24, 24, 3) for img in ds.images.values())


def test_ambiguity_same_pose_different_image():
    spec = small_spec()
    ds = synth.generate(spec)
    i, j = 2, 2 + spec.pose_period
    assert np.array_equal(ds.poses[i].thetas, ds.poses[j].thetas)
    diff = np.abs(ds.images[(0, i)] - ds.images[(0, j)]).max()
    assert diff > 0.02


def test_regeneration_is_bit_identical():
    a = synth.generate(small_spec())
    b = synth.generate(small_spec())
    assert np.array_equal(a.gt.positions, b.gt.positions)
    assert np.array_equal(a.gt.colors, b.gt.colors)
    for key in a.images:
        assert np.array_equal(a.images[key], b.images[key])
    c = synth.generate(small_spec(seed=4))
    assert not np.array_equal(a.gt.canonical_positions, c.gt.canonical_positions)


def test_appendage_offsets_recoverable_exactly():
    ds = synth.generate(small_spec(frame_count=12))
    mask = ds.gt.appendage_mask
    for f in range(ds.frame_count):
        rebuilt = ds.gt.canonical_positions[mask] + ds.gt.appendage_offsets[f]
        assert np.array_equal(ds.gt.positions[f][mask], rebuilt)
    # body gaussians are rigidly boned, never offset by the appendage field
    frozen = synth.generate(small_spec(frame_count=12, motion_amplitude=0.0))
    still = frozen.gt.appendage_mask
    for f in range(frozen.frame_count):
        assert np.array_equal(frozen.gt.positions[f][~still],
                              frozen.gt.canonical_positions[~still])


def test_default_split_shapes():
    ds = synth.generate(small_spec(camera_count=8))
    sp = synth.default_split(ds)
    assert sp.train_frames == tuple(range(20))
    assert sp.novel_frames == tuple(range(22, 30))
    assert sp.train_views == tuple(range(6))
    assert sp.test_views == (6, 7)
    assert not set(sp.train_frames) & set(sp.novel_frames)


def test_split_validation():
    ds = synth.generate(small_spec(frame_count=10))
    full = synth.split(ds, range(10), [], range(4), [])
    assert full.novel_frames == ()
    assert full.test_views == ()
    with pytest.raises(ValueError):
        synth.split(ds, [], range(3), range(4), [])
    with pytest.raises(ValueError):
        synth.split(ds, range(10), [11], range(4), [])
    with pytest.raises(ValueError):
        synth.split(ds, range(10), [], range(5), [])


def test_training_set_conversion():
    ds = synth.generate(small_spec(frame_count=12, camera_count=4))
    sp = synth.split(ds, range(8), range(10, 12), (0, 1, 2), (3,))
    ts = synth.training_set(ds, sp)
    assert sorted(ts.images) == [(v, f) for v in (0, 1, 2) for f in range(8)]
    assert ts.frame_count == 8
    assert set(ts.cameras) == {0, 1, 2}
    assert np.array_equal(ts.images[(1, 3)], ds.images[(1, 3)])


def test_ground_truth_round_trip(tmp_path):
    ds = synth.generate(small_spec(frame_count=10))
    path = tmp_path / "gt_gaussians.bin"
    synth.save_ground_truth(ds.gt, path)
    back = synth.load_ground_truth(path)
    assert np.array_equal(back.positions, ds.gt.positions)
    assert np.array_equal(back.rotations, ds.gt.rotations)
    assert np.array_equal(back.canonical_positions, ds.gt.canonical_positions)
    assert np.array_equal(back.appendage_offsets, ds.gt.appendage_offsets)
    assert np.array_equal(back.joint_index, ds.gt.joint_index)
    assert np.array_equal(back.appendage_mask, ds.gt.appendage_mask)
    assert np.array_equal(back.colors, ds.gt.colors)


def test_ground_truth_rejects_bad_header(tmp_path):
    path = tmp_path / "gt_gaussians.bin"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(ValueError):
        synth.load_ground_truth(path)
    ds = synth.generate(small_spec(frame_count=10))
    synth.save_ground_truth(ds.gt, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99  # version
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        synth.load_ground_truth(path)


def test_dataset_save_load_round_trip(tmp_path):
    ds = synth.generate(small_spec(frame_count=10))
    synth.save_dataset(ds, tmp_path)
    assert (tmp_path / "images" / "view0" / "frame0.png").exists()
    assert (tmp_path / "split.json").exists()
    back = synth.load_dataset(tmp_path)
    assert back.spec == ds.spec
    assert back.view_count == ds.view_count
    assert len(back.poses) == len(ds.poses)
    for f in range(10):
        assert np.array_equal(back.poses[f].thetas, ds.poses[f].thetas)
    for key, img in ds.images.items():
        assert np.abs(back.images[key] - img).max() <= 0.5 / 255.0 + 1e-12
    assert np.array_equal(back.gt.positions, ds.gt.positions)
    for c_back, c_orig in zip(back.cameras, ds.cameras):
        assert c_back.width == c_orig.width
        assert np.array_equal(c_back.rotation, c_orig.rotation)
        assert np.array_equal(c_back.translation, c_orig.translation)


def test_load_dataset_reports_missing_file(tmp_path):
    ds = synth.generate(small_spec(frame_count=10))
    synth.save_dataset(ds, tmp_path)
    (tmp_path / "cameras.json").unlink()
    with pytest.raises(ValueError, match="cameras.json"):
        synth.load_dataset(tmp_path)


def test_saved_files_are_deterministic(tmp_path):
    ds1 = synth.generate(small_spec(frame_count=10))
    ds2 = synth.generate(small_spec(frame_count=10))
    d1, d2 = tmp_path / "a", tmp_path / "b"
    synth.save_dataset(ds1, d1)
    synth.save_dataset(ds2, d2)
    for rel in ("cameras.json", "poses.csv", "gt_gaussians.bin",
                "images/view0/frame0.png", "images/view3/frame9.png"):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()


def test_frame_set_matches_rendered_images():
    ds = synth.generate(small_spec(frame_count=10))
    from hexavatar.rasterizer import render
    img = render(ds.frame_set(4), ds.cameras[1]).rgb
    assert np.array_equal(img, ds.images[(1, 4)])
    assert psnr(img, ds.images[(1, 4)]) == np.inf
