import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsrect.motion import (DEFAULT_MAX_RZ, DEFAULT_MAX_TX, MotionCurve, PolynomialTrajectory, eval_trajectory,
                           fit_trajectory, projection_matrix, random_trajectory, read_motion_csv,
                           read_trajectory_json, sample_motion_at, vandermonde, write_motion_csv,
                           write_trajectory_json)


def test_curve_validates_lengths():
    with pytest.raises(ValueError):
        MotionCurve(np.zeros(4), np.zeros(5))


def test_curve_rejects_nan():
    with pytest.raises(ValueError):
        MotionCurve([0.0, np.nan], [0.0, 0.0])


# -- lookup between rows --------------------------------------------------------

@pytest.fixture
def ramp():
    tx = np.array([0.0, 0.5, 0.0, 1.0, 2.0, 2.0])
    rz = np.array([0.0, 0.0, 0.1, 0.0, 0.2, 0.3])
    return MotionCurve(tx, rz)


def test_lookup_on_row(ramp):
    assert sample_motion_at(ramp, 3.0) == (1.0, 0.0)


def test_lookup_midpoint(ramp):
    t, a = sample_motion_at(ramp, 3.5)
    assert (t, a) == pytest.approx((1.5, 0.1))


def test_lookup_clamps(ramp):
    assert sample_motion_at(ramp, -2.0) == (0.0, 0.0)
    assert sample_motion_at(ramp, 40.0) == (2.0, 0.3)


def test_lookup_matches_interp(ramp):
    x = np.linspace(-3, 9, 301)
    t, a = sample_motion_at(ramp, x)
    np.testing.assert_allclose(t, np.interp(x, np.arange(6), ramp.tx), atol=1e-15)
    np.testing.assert_allclose(a, np.interp(x, np.arange(6), ramp.rz), atol=1e-15)


@settings(max_examples=80, deadline=None)
@given(st.floats(-2, 7), st.floats(-1e-3, 1e-3))
def test_lookup_is_continuous(x, dx):
    curve = MotionCurve(np.sin(np.arange(6.0)), np.cos(np.arange(6.0)))
    t0, _ = sample_motion_at(curve, x)
    t1, _ = sample_motion_at(curve, x + dx)
    slope = np.abs(np.diff(curve.tx)).max()
    assert abs(t1 - t0) <= slope * abs(dx) + 1e-12


# -- fitting ------------------------------------------------------------------------

def test_cubic_round_trip():
    traj = PolynomialTrajectory(3, [1.0, -2.0, 3.0, 0.5], [0.01, 0.02, -0.03, 0.04])
    fit = fit_trajectory(eval_trajectory(traj, 64))
    np.testing.assert_allclose(fit.coeffs_tx, traj.coeffs_tx, atol=1e-9)
    np.testing.assert_allclose(fit.coeffs_rz, traj.coeffs_rz, atol=1e-9)


def test_fit_constant_curve():
    fit = fit_trajectory(MotionCurve.constant(10, tx=3.0, rz=0.1))
    np.testing.assert_allclose(fit.coeffs_tx, [3, 0, 0, 0], atol=1e-10)
    np.testing.assert_allclose(fit.coeffs_rz, [0.1, 0, 0, 0], atol=1e-10)


def test_fit_needs_enough_rows():
    with pytest.raises(ValueError):
        fit_trajectory(MotionCurve.zeros(3), degree=3)


def test_fit_is_least_squares_optimal():
    rng = np.random.default_rng(5)
    curve = MotionCurve(rng.normal(size=40), rng.normal(size=40))
    fit = fit_trajectory(curve)
    v = vandermonde(40, 3)
    best = np.sum((v @ fit.coeffs_tx - curve.tx) ** 2)
    for _ in range(200):
        c = fit.coeffs_tx + rng.normal(scale=0.1, size=4)
        assert np.sum((v @ c - curve.tx) ** 2) >= best - 1e-12


def test_projection_idempotent_and_symmetric():
    p = projection_matrix(64)
    assert np.max(np.abs(p @ p - p)) <= 1e-6
    np.testing.assert_allclose(p, p.T, atol=1e-12)


def test_projection_equals_fit_then_eval():
    rng = np.random.default_rng(2)
    curve = MotionCurve(rng.normal(size=32), rng.normal(size=32))
    p = projection_matrix(32)
    smooth = eval_trajectory(fit_trajectory(curve), 32)
    np.testing.assert_allclose(p @ curve.tx, smooth.tx, atol=1e-10)


# -- random trajectories -------------------------------------------------------------

def test_zero_ranges_give_zero_trajectory():
    traj = random_trajectory(9, 0.0, 0.0)
    assert not traj.coeffs_tx.any() and not traj.coeffs_rz.any()


def test_random_trajectory_is_deterministic():
    a, b = random_trajectory(77), random_trajectory(77)
    assert np.array_equal(a.coeffs_tx, b.coeffs_tx) and np.array_equal(a.coeffs_rz, b.coeffs_rz)
    assert a.degree == 2


def test_random_trajectories_stay_in_range():
    s = np.linspace(0, 1, 1000)
    v = s[:, None] ** np.arange(3)
    for seed in range(1000):
        traj = random_trajectory(seed)
        assert np.max(np.abs(v @ traj.coeffs_tx)) <= DEFAULT_MAX_TX + 1e-12
        assert np.max(np.abs(v @ traj.coeffs_rz)) <= DEFAULT_MAX_RZ + 1e-12


def test_default_rotation_is_four_degrees():
    assert DEFAULT_MAX_RZ == pytest.approx(math.radians(4))


# -- files -----------------------------------------------------------------------------

def test_motion_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    curve = MotionCurve(rng.normal(size=8), rng.normal(size=8) * 0.01)
    write_motion_csv(tmp_path / "m.csv", curve)
    back = read_motion_csv(tmp_path / "m.csv")
    assert np.array_equal(back.tx, curve.tx) and np.array_equal(back.rz, curve.rz)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "row,tx_px,rz_rad"


def test_motion_csv_rejects_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("i,t,r\n0,1,2\n")
    with pytest.raises(ValueError):
        read_motion_csv(tmp_path / "m.csv")


def test_motion_csv_rejects_gaps(tmp_path):
    (tmp_path / "m.csv").write_text("row,tx_px,rz_rad\n0,1,0\n2,1,0\n")
    with pytest.raises(ValueError):
        read_motion_csv(tmp_path / "m.csv")


def test_trajectory_json_round_trip(tmp_path):
    traj = random_trajectory(4)
    write_trajectory_json(tmp_path / "t.json", traj)
    back = read_trajectory_json(tmp_path / "t.json")
    assert back.degree == 2 and np.array_equal(back.coeffs_tx, traj.coeffs_tx)
    assert back.to_json()["normalization"] == "s=i/(r-1)"


def test_trajectory_rejects_wrong_coefficient_count():
    with pytest.raises(ValueError):
        PolynomialTrajectory(3, [1, 2, 3], [1, 2, 3, 4])
