import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsrect.imaging import (bilinear_sample, check_image, load_png, masked_psnr, row_motion_forward,
                            row_motion_inverse, sample_indices, save_png, scatter_st_rectify, visibility_mask,
                            warp_rs_from_gs)
from rsrect.motion import MotionCurve, eval_trajectory, random_trajectory

from oracles import bilinear_scalar, warp_rs_scalar


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- bilinear sampling --------------------------------------------------------

def test_sample_at_lattice_point_is_exact(rng):
    img = rng.uniform(0, 1, (5, 6, 3))
    # centered (x, y) for index (2, 4)
    out = bilinear_sample(img, 2 - 2.0, 4 - 2.5)
    assert np.array_equal(out, img[2, 4])


def test_sample_midpoint():
    img = np.zeros((1, 2, 1))
    img[0, 1, 0] = 1.0
    assert sample_indices(img, np.array(0.0), np.array(0.5))[0] == pytest.approx(0.5)


def test_ramp_matches_scalar_oracle(rng):
    img = (np.arange(4)[:, None, None] * 0.2 + np.arange(4)[None, :, None] * 0.05 + np.zeros((1, 1, 2)))
    img[..., 1] = rng.uniform(0, 1, (4, 4))
    fi = rng.uniform(0, 3, 17)
    fj = rng.uniform(0, 3, 17)
    got = sample_indices(img, fi, fj)
    want = np.array([bilinear_scalar(img, a, b) for a, b in zip(fi, fj)])
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_sample_far_outside_is_zero(rng):
    img = rng.uniform(0.1, 1, (4, 4, 3))
    assert np.all(sample_indices(img, np.array([-3.0, 10.0]), np.array([1.0, 1.0])) == 0)


def test_partial_footprint_uses_zero_taps():
    img = np.ones((3, 3, 1))
    assert sample_indices(img, np.array(-0.25), np.array(1.0))[0] == pytest.approx(0.75)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 5), st.floats(-1, 5), st.floats(-1, 1), st.floats(-1, 1))
def test_bilinear_is_lipschitz(seed, i, j, di, dj):
    img = np.random.default_rng(seed).uniform(0, 1, (5, 5, 1))
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    lip = max(np.abs(np.diff(padded, axis=0)).max(), np.abs(np.diff(padded, axis=1)).max())
    a = sample_indices(img, np.array(i), np.array(j))[0]
    b = sample_indices(img, np.array(i + di), np.array(j + dj))[0]
    assert abs(a - b) <= lip * (abs(di) + abs(dj)) + 1e-12


# -- the row-motion map -------------------------------------------------------

def test_inverse_pure_shift():
    assert row_motion_inverse(5.0, 3.0, 2.0, 0.0) == pytest.approx((3.0, 3.0))


def test_inverse_quarter_turn():
    xg, yg = row_motion_inverse(1.0, 0.0, 0.0, math.pi / 2)
    assert (xg, yg) == pytest.approx((0.0, -1.0), abs=1e-15)


def test_inverse_round_trip(rng):
    p = rng.uniform(-200, 200, (100, 2))
    t = rng.uniform(-20, 20, 100)
    a = rng.uniform(-0.5, 0.5, 100)
    xg, yg = row_motion_inverse(p[:, 0], p[:, 1], t, a)
    xr, yr = row_motion_forward(xg, yg, t, a)
    assert np.max(np.abs(xr - p[:, 0])) <= 1e-9
    assert np.max(np.abs(yr - p[:, 1])) <= 1e-9


# -- gather warp --------------------------------------------------------------

def test_zero_motion_is_identity(rng):
    gs = rng.uniform(0.05, 1, (16, 16, 3))
    rs, mask = warp_rs_from_gs(gs, MotionCurve.zeros(16))
    assert np.array_equal(rs, gs)
    assert np.all(mask == 1)


def test_constant_translation_shifts_rows(rng):
    gs = rng.uniform(0.05, 1, (12, 10, 3))
    rs, mask = warp_rs_from_gs(gs, MotionCurve.constant(12, tx=2.0))
    np.testing.assert_array_equal(rs[2:], gs[:-2])
    assert np.all(mask[:2] == 0) and np.all(mask[2:] == 1)


def test_checkerboard_ramp_matches_scalar_oracle():
    gs = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)[..., None] * 0.8 + 0.1
    tx = np.linspace(0, 2, 8)
    rz = np.zeros(8)
    rs, _ = warp_rs_from_gs(gs, MotionCurve(tx, rz))
    np.testing.assert_allclose(rs, np.array(warp_rs_scalar(gs, tx, rz)), atol=1e-6)


def test_rotating_warp_matches_scalar_oracle(rng):
    gs = rng.uniform(0.05, 1, (9, 9, 3))
    tx = rng.uniform(-1, 1, 9)
    rz = rng.uniform(-0.2, 0.2, 9)
    rs, _ = warp_rs_from_gs(gs, MotionCurve(tx, rz))
    np.testing.assert_allclose(rs, np.array(warp_rs_scalar(gs, tx, rz)), atol=1e-6)


def test_warp_rejects_mismatched_motion(rng):
    with pytest.raises(ValueError):
        warp_rs_from_gs(rng.uniform(size=(8, 8, 3)), MotionCurve.zeros(7))


def test_mask_follows_zero_rule(rng):
    img = rng.uniform(0.1, 1, (6, 6, 3))
    img[1, 2] = 0
    img[3, 4, 0] = 0  # one zero channel is still visible
    m = visibility_mask(img)
    assert m[1, 2] == 0 and m[3, 4] == 1 and m.sum() == 35


# -- scatter warp -------------------------------------------------------------

def test_scatter_zero_motion(rng):
    rs = rng.uniform(0.05, 1, (10, 10, 3))
    out, holes = scatter_st_rectify(rs, MotionCurve.zeros(10))
    assert np.array_equal(out, rs) and not holes.any()


def test_scatter_unit_shift_leaves_one_row_of_holes(rng):
    rs = rng.uniform(0.05, 1, (10, 10, 3))
    _, holes = scatter_st_rectify(rs, MotionCurve.constant(10, tx=1.0))
    assert holes.sum() == 10 and holes[-1].all()


def _occupancy_oracle(motion, h, w):
    hit = set()
    ci, cj = (h - 1) / 2, (w - 1) / 2
    for i in range(h):
        c, s = math.cos(motion.rz[i]), math.sin(motion.rz[i])
        for j in range(w):
            u = i - ci - motion.tx[i]
            xg = u * c + (j - cj) * s
            yg = -u * s + (j - cj) * c
            ti, tj = math.floor(xg + ci + 0.5), math.floor(yg + cj + 0.5)
            if 0 <= ti < h and 0 <= tj < w:
                hit.add((ti, tj))
    return h * w - len(hit)


@pytest.mark.parametrize("seed", [3, 8, 21])
def test_scatter_hole_count_matches_occupancy_oracle(seed):
    motion = eval_trajectory(random_trajectory(seed), 64)
    rs = np.full((64, 64, 1), 0.5)
    _, holes = scatter_st_rectify(rs, motion)
    assert holes.sum() == _occupancy_oracle(motion, 64, 64)


def test_scatter_collisions_keep_last_writer():
    rs = np.arange(1, 10, dtype=float).reshape(3, 3, 1) / 10
    # row 1 lands on row 0 as well: row 1 is written after row 0
    motion = MotionCurve([0.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    out, holes = scatter_st_rectify(rs, motion)
    np.testing.assert_array_equal(out[0, :, 0], rs[1, :, 0])
    np.testing.assert_array_equal(out[1, :, 0], rs[2, :, 0])
    assert holes[2].all()


# -- validation, metrics, files -----------------------------------------------

def test_check_image_rejects_nan():
    img = np.zeros((4, 4, 3))
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_image(img)


def test_masked_psnr_ignores_masked_pixels():
    ref = np.full((4, 4, 1), 0.5)
    pred = ref.copy()
    pred[0] = 0.0
    mask = np.ones((4, 4))
    mask[0] = 0
    assert masked_psnr(pred, ref, mask) == float("inf")
    assert masked_psnr(pred, ref, np.ones((4, 4))) == pytest.approx(10 * math.log10(1 / (0.25 / 4)))


def test_png_round_trip(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [0.2, 1 / 510, 3 / 510]]])
    p = tmp_path / "a.png"
    save_png(p, img)
    back = load_png(p)
    # 0.5 -> 128 (round half up)
    np.testing.assert_array_equal(np.round(back * 255), [[[0, 128, 255], [51, 1, 2]]])


def test_png_grayscale(tmp_path):
    img = np.linspace(0.1, 0.9, 12).reshape(3, 4, 1)
    save_png(tmp_path / "g.png", img)
    assert load_png(tmp_path / "g.png").shape == (3, 4, 1)
