import json

import numpy as np
import pytest

from rsrect.imaging import visibility_mask, warp_rs_from_gs
from rsrect.motion import PolynomialTrajectory, eval_trajectory
from rsrect.synthetic import facade_images
from rsrect.training.data import (ManifestError, file_digest, generate_dataset, load_samples, make_sample,
                                  margin_for, read_manifest, write_dataset)

R = 64


@pytest.fixture(scope="module")
def clean():
    return facade_images(3, R + 2 * margin_for(R), 0)


def test_margin_scales_the_hundred_pixel_border():
    assert margin_for(256) == 50 and margin_for(64) == 13


def test_zero_motion_sample_is_bit_exact(clean):
    s = make_sample(clean[0], PolynomialTrajectory(2, [0, 0, 0], [0, 0, 0]), R)
    assert np.array_equal(s.rs, s.gs)
    assert not s.motion.tx.any()


def test_undersized_image_rejected(clean):
    with pytest.raises(ValueError, match="90x90"):
        make_sample(clean[0][:80, :80], PolynomialTrajectory(2, [0, 0, 0], [0, 0, 0]), R)


def test_no_holes_in_cropped_frames(clean):
    samples = list(generate_dataset(clean[:1] * 100, 1, 3, R))
    for s in samples:
        assert visibility_mask(s.rs).all(), s.name


def test_sample_reproduces_from_its_motion(clean):
    # warping the cropped GS with the cropped curve agrees wherever the
    # crop itself holds every bilinear tap
    for s in generate_dataset(clean[:2], 3, 5, R):
        rs, _ = warp_rs_from_gs(s.gs, s.motion)
        inner = visibility_mask(rs).astype(bool)
        np.testing.assert_allclose(rs[inner], s.rs[inner], atol=1e-6)
        assert inner.mean() > 0.6


def test_trajectory_is_expressed_over_the_crop(clean):
    s = next(generate_dataset(clean[:1], 1, 9, R))
    np.testing.assert_allclose(eval_trajectory(s.trajectory, R).tx, s.motion.tx, atol=1e-9)


def test_generation_is_deterministic(clean):
    a = list(generate_dataset(clean, 2, 11, R))
    b = list(generate_dataset(clean, 2, 11, R))
    assert len(a) == 6
    for x, y in zip(a, b):
        assert np.array_equal(x.rs, y.rs) and x.seed == y.seed and x.name == y.name


def test_manifest_round_trip_and_hash(tmp_path, clean):
    samples = list(generate_dataset(clean[:2], 2, 7, R))
    m1 = write_dataset(samples, tmp_path / "a")
    m2 = write_dataset(samples, tmp_path / "b")
    assert file_digest(m1) == file_digest(m2)
    recs = read_manifest(m1)
    assert len(recs) == 4 and recs[0]["gs"] == "gs/img000_mot000.png"
    back = load_samples(m1)
    assert np.max(np.abs(back[0].gs - samples[0].gs)) <= 0.5 / 255 + 1e-12
    assert np.array_equal(back[1].motion.tx, samples[1].motion.tx)
    assert len(load_samples(m1, limit=3)) == 3


def test_malformed_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(ManifestError, match=":1:"):
        read_manifest(p)
    p.write_text(json.dumps({"gs": "a.png"}) + "\n")
    with pytest.raises(ManifestError, match="missing"):
        read_manifest(p)
