import math

import numpy as np
import pytest

from rsrect.motion import PolynomialTrajectory
from rsrect.nn.model import RSNet
from rsrect.synthetic import facade_images
from rsrect.training.data import generate_dataset, make_sample, margin_for
from rsrect.training.losses import LossWeights
from rsrect.training.loop import (METRIC_FIELDS, TrainingDiverged, pipeline_backward, pipeline_forward,
                                  pretrain_motion, regression_loss, train_end_to_end)

R = 32


@pytest.fixture(scope="module")
def samples():
    return list(generate_dataset(facade_images(5, R + 2 * margin_for(R), 1), 2, 3, R))


def test_regression_loss_weights_degrees_like_pixels(samples):
    model = RSNet(R)
    for k in model.params:
        model.params[k][...] = 0
    loss, d_tx, d_rz, _ = regression_loss(model, samples, [0])
    m = samples[0].motion
    assert loss == pytest.approx(np.mean(m.tx ** 2) + np.mean(np.degrees(m.rz) ** 2), rel=1e-6)


def test_pretraining_descends(samples):
    model = RSNet(R, seed=1)
    hist = pretrain_motion(model, samples, epochs=5)
    assert [e for e, _ in hist] == list(range(6))
    assert hist[-1][1] < hist[0][1]


def test_pretraining_leaves_row_block_alone(samples):
    model = RSNet(R, seed=1)
    before = {k: model.params[k].copy() for k in model.row_param_names()}
    pretrain_motion(model, samples[:4], epochs=1)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_single_sample_regression_overfits(samples):
    model = RSNet(R, seed=0)
    s = samples[:1]
    pretrain_motion(model, s, epochs=500, batch_size=1)
    tx, rz, _ = model.motion_forward(s[0].rs, update_stats=False)
    assert np.sqrt(np.mean((tx[0] - s[0].motion.tx) ** 2)) < 0.2
    assert np.degrees(np.sqrt(np.mean((rz[0] - s[0].motion.rz) ** 2))) < 0.2


def test_zero_motion_targets_pull_predictions_to_zero():
    clean = facade_images(4, R + 2 * margin_for(R), 2)
    zero = PolynomialTrajectory(2, [0, 0, 0], [0, 0, 0])
    still = [make_sample(c, zero, R) for c in clean]
    model = RSNet(R, seed=4)
    hist = pretrain_motion(model, still, epochs=20)
    assert hist[-1][1] < 0.05 * hist[0][1]


def test_regeneration_branch_is_silent_without_its_weights(samples):
    model = RSNet(R, seed=0, dtype=np.float64)
    rs = np.stack([s.rs for s in samples[:2]])
    gs = np.stack([s.gs for s in samples[:2]])
    probe = {}
    fwd = pipeline_forward(model, rs, gs, LossWeights(1, 0, 0.5, 0))
    pipeline_backward(model, fwd, probe)
    assert not probe["regen_tx"].any() and not probe["regen_rz"].any()
    fwd = pipeline_forward(model, rs, gs)
    pipeline_backward(model, fwd, probe)
    assert probe["regen_tx"].any()


def test_perfect_estimates_have_zero_loss(samples):
    from rsrect.training.losses import total_loss
    s = samples[0]
    res = total_loss(s.rs, s.gs, s.gs, s.rs, masks={"rec": np.ones((R, R)), "reg": np.ones((R, R))})
    assert res.total == 0.0


def test_end_to_end_metrics_and_descent(samples):
    model = RSNet(R, seed=0)
    res = train_end_to_end(model, samples[:4], epochs=3)
    assert [m["epoch"] for m in res.metrics] == [0, 1, 2, 3]
    assert set(res.metrics[0]) == set(METRIC_FIELDS)
    assert res.metrics[-1]["step"] == 3
    assert all(math.isfinite(m["L_total"]) for m in res.metrics)
    assert res.final_loss < res.initial_loss


def test_stop_at_reduction(samples):
    res = train_end_to_end(RSNet(R), samples[:4], epochs=5, stop_at_reduction=-1.0)  # any loss under twice the start
    assert res.stopped_early and res.epochs_run == 1


def test_divergence_keeps_last_good_parameters(samples):
    model = RSNet(R)
    model.params["tx.fc2.b"][0] = np.nan
    good = {k: v.copy() for k, v in model.params.items()}
    with pytest.raises(TrainingDiverged):
        train_end_to_end(model, samples[:4], epochs=1)
    for k in good:
        np.testing.assert_array_equal(model.params[k], good[k])
