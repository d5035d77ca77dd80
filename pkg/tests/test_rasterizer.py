import math

import numpy as np
import pytest

from hexavatar import rasterizer as ras
from hexavatar.sh import SH_C0, SH_C1, GaussianColorStore, color_store_from_rgb


def simple_camera(width=16, height=16, fx=30.0, fy=30.0):
    return ras.Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
        rotation=np.eye(3), translation=np.zeros(3),
        near=0.1, far=50.0,
    )


def random_set(seed, n, degree=0, alpha_range=(0.3, 0.6), z_range=(2.0, 4.0),
               scale_range=(0.05, 0.15), spread=0.55):
    rng = np.random.default_rng(seed)
    z = rng.uniform(*z_range, size=n)
    xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None] / 3.0
    positions = np.column_stack([xy, z])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
    scales = rng.uniform(*scale_range, size=(n, 3))
    opac = rng.uniform(*alpha_range, size=n)
    if degree == 0:
        colors = color_store_from_rgb(rng.uniform(0.25, 0.75, size=(n, 3)))
    else:
        coeffs = np.zeros((n, (degree + 1) ** 2, 3))
        coeffs[:, 0] = (rng.uniform(0.3, 0.7, size=(n, 3)) - 0.5) / SH_C0
        coeffs[:, 1:] = rng.uniform(-0.08, 0.08, size=(n, (degree + 1) ** 2 - 1, 3))
        colors = GaussianColorStore(coeffs.astype(np.float64), degree)
    return ras.PosedGaussianSet(positions, quats, scales, opac, colors)


# --- independent brute-force reference ------------------------------------

def _quat_mat(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / math.sqrt(sum(v * v for v in q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _oracle_color(store, direction, i):
    x, y, z = direction
    c = SH_C0 * store.coeffs[i, 0].astype(np.float64)
    if store.degree >= 1:
        c = c - SH_C1 * y * store.coeffs[i, 1] + SH_C1 * z * store.coeffs[i, 2] \
            - SH_C1 * x * store.coeffs[i, 3]
    return np.clip(c + 0.5, 0.0, 1.0)


def oracle_render(gset, cam, background=(0.0, 0.0, 0.0)):
    """Per-pixel direct evaluation of the blending sum over a global
    stable depth sort; no tiles, no shared state with the implementation."""
    n = len(gset)
    cam_pos = -cam.rotation.T @ cam.translation
    splats = []
    for i in range(n):
        xc = cam.rotation @ gset.positions[i] + cam.translation
        depth = xc[2]
        if depth < cam.near or depth > cam.far:
            continue
        mx = cam.fx * xc[0] / depth + cam.cx
        my = cam.fy * xc[1] / depth + cam.cy
        r3 = _quat_mat(gset.rotations[i])
        cov3 = r3 @ np.diag(np.asarray(gset.scales[i], dtype=np.float64) ** 2) @ r3.T
        jac = np.array([
            [cam.fx / depth, 0.0, -cam.fx * xc[0] / depth**2],
            [0.0, cam.fy / depth, -cam.fy * xc[1] / depth**2],
        ])
        v = jac @ cam.rotation
        cov2 = v @ cov3 @ v.T
        a, b, c = cov2[0, 0] + 0.3, cov2[0, 1], cov2[1, 1] + 0.3
        det = a * c - b * b
        qxx, qxy, qyy = c / det, -b / det, a / det
        lam = 0.5 * (a + c) + math.hypot(0.5 * (a - c), b)
        radius = 3.0 * math.sqrt(lam)
        x0 = max(int(math.ceil(mx - radius - 0.5)), 0)
        x1 = min(int(math.floor(mx + radius - 0.5)), cam.width - 1)
        y0 = max(int(math.ceil(my - radius - 0.5)), 0)
        y1 = min(int(math.floor(my + radius - 0.5)), cam.height - 1)
        view = gset.positions[i] - cam_pos
        direction = view / np.linalg.norm(view)
        color = _oracle_color(gset.colors, direction, i)
        splats.append((depth, i, mx, my, qxx, qxy, qyy,
                       (x0, x1, y0, y1), float(gset.opacities[i]), color))
    splats.sort(key=lambda s: (s[0], s[1]))

    img = np.zeros((cam.height, cam.width, 3))
    transmit = np.ones((cam.height, cam.width))
    for py in range(cam.height):
        for px in range(cam.width):
            t = 1.0
            acc = np.zeros(3)
            for depth, i, mx, my, qxx, qxy, qyy, rect, alpha, color in splats:
                if t < 1e-4:
                    break
                if px < rect[0] or px > rect[1] or py < rect[2] or py > rect[3]:
                    continue
                dx = px + 0.5 - mx
                dy = py + 0.5 - my
                power = -0.5 * (qxx * dx * dx + qyy * dy * dy) - qxy * dx * dy
                alpha_p = alpha * math.exp(power)
                if alpha_p < 1.0 / 255.0:
                    continue
                acc = acc + color * (alpha_p * t)
                t *= 1.0 - alpha_p
            img[py, px] = acc + np.asarray(background) * t
            transmit[py, px] = t
    return img, transmit


# --- covariance / projection ----------------------------------------------

def test_covariance_identity():
    got = ras.covariance_3d(np.array([1.0, 0, 0, 0]), np.ones(3))
    assert np.max(np.abs(got - np.eye(3))) < 1e-12


def test_covariance_axis_aligned():
    got = ras.covariance_3d(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
    assert np.max(np.abs(got - np.diag([4.0, 1.0, 1.0]))) < 1e-12


def test_covariance_eigenvalues_match_scales():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 3.0, size=3)
        cov = ras.covariance_3d(q, s)
        assert np.max(np.abs(cov - cov.T)) < 1e-12
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.max(np.abs(eig - np.sort(s**2))) < 1e-5


def test_project_on_axis_hits_center():
    cam = simple_camera()
    mean2d, _, depth, culled = ras.project_gaussian(
        np.array([0.0, 0.0, 3.0]), np.eye(3) * 0.01, cam
    )
    assert not culled
    assert np.max(np.abs(mean2d - np.array([8.0, 8.0]))) < 1e-12
    assert depth == 3.0


def test_project_isotropic_screen_cov():
    cam = simple_camera()
    _, cov2d, _, _ = ras.project_gaussian(
        np.array([0.0, 0.0, 3.0]), np.eye(3) * 0.04, cam
    )
    pre_floor = cov2d - 0.3 * np.eye(2)
    assert abs(pre_floor[0, 0] - pre_floor[1, 1]) < 1e-12
    assert abs(pre_floor[0, 1]) < 1e-12


def test_project_culls_outside_depth_range():
    cam = simple_camera()
    for z in (0.05, 60.0, -1.0):
        _, _, _, culled = ras.project_gaussian(np.array([0.0, 0.0, z]), np.eye(3), cam)
        assert culled


def test_project_matches_pinhole_oracle():
    cam = ras.Camera(fx=40.0, fy=35.0, cx=9.0, cy=7.0, width=20, height=14,
                     rotation=_quat_mat((0.9, 0.1, -0.2, 0.3)),
                     translation=np.array([0.2, -0.1, 2.5]), near=0.1, far=100.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.normal(size=3)
        xc = cam.rotation @ x + cam.translation
        if xc[2] < 0.2:
            continue
        mean2d, _, depth, culled = ras.project_gaussian(x, np.eye(3) * 0.01, cam)
        want = np.array([40.0 * xc[0] / xc[2] + 9.0, 35.0 * xc[1] / xc[2] + 7.0])
        assert not culled
        assert abs(depth - xc[2]) < 1e-12
        assert np.max(np.abs(mean2d - want)) <= 1e-6


# --- forward rendering ------------------------------------------------------

def test_render_empty_set_is_background():
    cam = simple_camera()
    empty = ras.PosedGaussianSet(
        np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
        GaussianColorStore(np.zeros((0, 1, 3)), 0),
    )
    img = ras.render(empty, cam, background=(0.2, 0.4, 0.6))
    assert np.max(np.abs(img.rgb - np.array([0.2, 0.4, 0.6]))) == 0.0
    assert np.array_equal(img.transmittance, np.ones((16, 16)))
    assert np.array_equal(img.contrib_count, np.zeros((16, 16), dtype=np.int32))


def test_render_single_saturated_gaussian_center_color():
    cam = simple_camera()
    color = np.array([0.2, 0.6, 0.4])
    gset = ras.PosedGaussianSet(
        np.array([[0.0, 0.0, 2.0]]), np.array([[1.0, 0, 0, 0]]),
        np.array([[1.5, 1.5, 1.5]]), np.array([0.999999]),
        color_store_from_rgb(color[None, :]),
    )
    img = ras.render(gset, cam)
    assert np.max(np.abs(img.rgb[8, 8] - color)) < 1e-3


def test_render_matches_bruteforce_oracle():
    cam = simple_camera()
    gset = random_set(seed=2, n=10)
    img = ras.render(gset, cam)
    want_rgb, want_t = oracle_render(gset, cam)
    assert np.max(np.abs(img.rgb - want_rgb)) <= 1e-12
    assert np.max(np.abs(img.transmittance - want_t)) <= 1e-12


def test_render_oracle_with_background_and_degree1():
    cam = simple_camera()
    gset = random_set(seed=3, n=8, degree=1)
    bg = (0.15, 0.05, 0.3)
    img = ras.render(gset, cam, background=bg)
    want_rgb, _ = oracle_render(gset, cam, background=bg)
    assert np.max(np.abs(img.rgb - want_rgb)) <= 1e-12


def test_tiling_invariance_bit_exact():
    cam = simple_camera()
    gset = random_set(seed=4, n=12)
    img8 = ras.render(gset, cam, tile_size=8)
    img16 = ras.render(gset, cam, tile_size=16)
    img_whole = ras.render(gset, cam, tile_size=16 * 4)
    assert np.array_equal(img8.rgb, img16.rgb)
    assert np.array_equal(img16.rgb, img_whole.rgb)
    assert np.array_equal(img8.transmittance, img16.transmittance)
    assert np.array_equal(img8.contrib_count, img16.contrib_count)


def test_transmittance_bounds():
    cam = simple_camera()
    gset = random_set(seed=5, n=20, alpha_range=(0.5, 0.9))
    img = ras.render(gset, cam)
    assert np.min(img.transmittance) >= 0.0
    assert np.max(img.transmittance) <= 1.0
    assert np.all(np.isfinite(img.rgb))


def test_full_occlusion_blocks_later_gaussians():
    # Three near-opaque blockers drive transmittance below the 1e-4 stop
    # threshold, so a gaussian behind them must not change the pixels at all.
    cam = simple_camera()
    front_pos = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.01], [0.0, 0.0, 2.02]])
    front_quat = np.tile([1.0, 0, 0, 0], (3, 1))
    front_scale = np.full((3, 3), 1.0)
    front_opac = np.full(3, 0.9999999)
    front_rgb = np.tile([0.9, 0.1, 0.1], (3, 1))
    both = ras.PosedGaussianSet(
        np.concatenate([front_pos, [[0.0, 0.0, 3.0]]]),
        np.concatenate([front_quat, [[1.0, 0, 0, 0]]]),
        np.concatenate([front_scale, [[1.0, 1.0, 1.0]]]),
        np.concatenate([front_opac, [0.8]]),
        color_store_from_rgb(np.concatenate([front_rgb, [[0.1, 0.9, 0.1]]])),
    )
    solo = ras.PosedGaussianSet(
        front_pos, front_quat, front_scale, front_opac,
        color_store_from_rgb(front_rgb),
    )
    img_both = ras.render(both, cam)
    img_solo = ras.render(solo, cam)
    center = np.s_[7:10, 7:10]
    assert np.max(img_both.transmittance[center]) < 1e-4
    assert np.array_equal(img_both.rgb[center], img_solo.rgb[center])


def test_equal_depth_ties_break_by_index():
    cam = simple_camera()
    positions = np.array([[0.0, 0.0, 2.5], [0.02, 0.0, 2.5]])
    gset = ras.PosedGaussianSet(
        positions, np.tile([1.0, 0, 0, 0], (2, 1)),
        np.full((2, 3), 0.5), np.array([0.6, 0.6]),
        color_store_from_rgb(np.array([[0.8, 0.2, 0.2], [0.2, 0.2, 0.8]])),
    )
    img = ras.render(gset, cam)
    want, _ = oracle_render(gset, cam)  # oracle ties break by index too
    assert np.max(np.abs(img.rgb - want)) <= 1e-12
    # Swapping the two gaussians must change the blend (order matters).
    swapped = ras.PosedGaussianSet(
        positions[::-1].copy(), np.tile([1.0, 0, 0, 0], (2, 1)),
        np.full((2, 3), 0.5), np.array([0.6, 0.6]),
        color_store_from_rgb(np.array([[0.2, 0.2, 0.8], [0.8, 0.2, 0.2]])),
    )
    img_sw = ras.render(swapped, cam)
    assert np.max(np.abs(img.rgb - img_sw.rgb)) > 1e-9


# --- backward ---------------------------------------------------------------

def test_backward_zero_upstream_zero_grads():
    cam = simple_camera()
    gset = random_set(seed=6, n=5)
    grads = ras.render_backward(gset, cam, np.zeros((16, 16, 3)))
    for v in grads.values():
        assert np.array_equal(v, np.zeros_like(v))


def test_backward_single_gaussian_color_chain():
    cam = simple_camera()
    gset = ras.PosedGaussianSet(
        np.array([[0.0, 0.0, 2.0]]), np.array([[1.0, 0, 0, 0]]),
        np.array([[0.08, 0.08, 0.08]]), np.array([0.5]),
        color_store_from_rgb(np.array([[0.5, 0.5, 0.5]])),
    )
    img = ras.render(gset, cam)
    alpha_p = 1.0 - img.transmittance[8, 8]
    upstream = np.zeros((16, 16, 3))
    upstream[8, 8, 1] = 1.0
    grads = ras.render_backward(gset, cam, upstream)
    # dC/d(dc coeff) = alpha' * T(=1) * SH_C0 on the driven channel.
    assert abs(grads["d_sh"][0, 0, 1] - alpha_p * SH_C0) < 1e-12
    assert grads["d_sh"][0, 0, 0] == 0.0


def test_backward_matches_finite_differences():
    cam = simple_camera(width=8, height=8, fx=14.0, fy=14.0)
    gset = random_set(seed=7, n=6, degree=1, alpha_range=(0.3, 0.55),
                      scale_range=(0.08, 0.2), spread=0.5)
    rng = np.random.default_rng(8)
    upstream = rng.uniform(0.2, 1.0, size=(8, 8, 3))

    grads = ras.render_backward(gset, cam, upstream)

    def loss(positions=None, rotations=None, scales=None, opacities=None, coeffs=None):
        g = ras.PosedGaussianSet(
            gset.positions if positions is None else positions,
            gset.rotations if rotations is None else rotations,
            gset.scales if scales is None else scales,
            gset.opacities if opacities is None else opacities,
            GaussianColorStore(
                gset.colors.coeffs if coeffs is None else coeffs, gset.colors.degree
            ),
        )
        return float(np.sum(upstream * ras.render(g, cam).rgb))

    h = 1e-4
    checked = 0
    worst = 0.0

    def fd_check(name, base, analytic, make_kwargs):
        nonlocal checked, worst
        flat = base.reshape(-1)
        for j in range(flat.size):
            pert = base.copy()
            pert.reshape(-1)[j] = flat[j] + h
            hi = loss(**make_kwargs(pert))
            pert.reshape(-1)[j] = flat[j] - h
            lo = loss(**make_kwargs(pert))
            fd = (hi - lo) / (2 * h)
            got = analytic.reshape(-1)[j]
            err = abs(fd - got) / max(abs(fd), 1e-4)
            worst = max(worst, err)
            checked += 1
            assert err <= 1e-3, f"{name}[{j}]: fd={fd:.6e} got={got:.6e}"

    fd_check("positions", gset.positions.copy(), grads["d_positions"],
             lambda p: {"positions": p})
    fd_check("rotations", gset.rotations.copy(), grads["d_rotations"],
             lambda p: {"rotations": p})
    fd_check("scales", gset.scales.copy(), grads["d_scales"],
             lambda p: {"scales": p})
    fd_check("opacities", gset.opacities.copy(), grads["d_opacities"],
             lambda p: {"opacities": p})
    fd_check("sh", gset.colors.coeffs.copy(), grads["d_sh"],
             lambda p: {"coeffs": p})
    assert checked == 6 * (3 + 4 + 3 + 1) + gset.colors.coeffs.size


# --- image io ----------------------------------------------------------------

def test_float_dump_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    rgb = rng.uniform(0, 1, size=(5, 7, 3)).astype(np.float32)
    path = tmp_path / "img.r3im"
    ras.save_float_dump(rgb, path)
    back = ras.load_float_dump(path)
    assert np.array_equal(back, rgb)
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.r3im"
        bad.write_bytes(b"NOPE" + b"\x00" * 16)
        ras.load_float_dump(bad)


def test_png_round_trip_quantized(tmp_path):
    rng = np.random.default_rng(10)
    rgb = rng.uniform(0, 1, size=(6, 4, 3))
    path = tmp_path / "img.png"
    ras.save_png(rgb, path)
    back = ras.load_png(path)
    assert np.max(np.abs(back - rgb)) <= 0.5 / 255.0 + 1e-9


def test_psnr_helper():
    a = np.zeros((4, 4, 3))
    assert ras.psnr(a, a) == float("inf")
    b = np.full((4, 4, 3), 0.1)
    assert abs(ras.psnr(a, b) - 20.0) < 1e-9
