"""Motion-regression pretraining and end-to-end training.

One end-to-end step: motion block -> cubic trajectory projection -> curve;
row block -> row map; rectify the RS input with (curve, row map); regenerate
the RS input from the GS target with the same curve; score both with the
masked losses; back-propagate through both warps into both blocks.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..imaging import masked_psnr, warp_rs_from_gs
from ..motion import MotionCurve, projection_matrix
from ..nn.warp_grad import warp_bwd
from ..rectifier import rectify_ts
from .losses import LossWeights, total_loss
from .optim import Adam

log = logging.getLogger(__name__)

RAD2DEG = 180.0 / math.pi
TERMS = ("rec_mse", "reg_mse", "rec_edge", "reg_edge")


class TrainingDiverged(RuntimeError):
    pass


def batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- motion regression ----------------------------------------------------------

def regression_loss(model, samples, idx, train=True, update_stats=False):
    """Mean over rows of ``(tx - tx*)^2 + (rz - rz*)^2`` with rz in degrees.

    Pixels and degrees are weighted equally; radians would make the rotation
    term vanish next to translations of several pixels.
    """
    x = np.stack([samples[i].rs for i in idx])
    tx, rz, cache = model.motion_forward(x, train, update_stats)
    ttx = np.stack([samples[i].motion.tx for i in idx])
    trz = np.stack([samples[i].motion.rz for i in idx])
    e_tx = tx.astype(np.float64) - ttx
    e_rz = (rz.astype(np.float64) - trz) * RAD2DEG
    n = e_tx.size
    loss = float((np.sum(e_tx ** 2) + np.sum(e_rz ** 2)) / n)
    return loss, (2.0 / n) * e_tx, (2.0 / n) * RAD2DEG * e_rz, cache


def evaluate_regression(model, samples, batch_size=4):
    total = 0.0
    for idx in batches(len(samples), batch_size):
        total += regression_loss(model, samples, idx)[0] * len(idx)
    return total / len(samples)


def pretrain_motion(model, samples, epochs=5, batch_size=4, optimizer=None, seed=0, max_samples=50):
    """Regress the motion block onto ground-truth curves; the row block is untouched.

    Returns the per-epoch history ``[(epoch, loss), ...]`` where epoch 0 is
    the loss before any update.
    """
    samples = list(samples)[:max_samples]
    opt = optimizer or Adam()
    rng = np.random.default_rng(seed)
    names = model.motion_param_names()
    history = [(0, evaluate_regression(model, samples, batch_size))]
    for epoch in range(1, epochs + 1):
        for idx in batches(len(samples), batch_size, rng):
            loss, d_tx, d_rz, cache = regression_loss(model, samples, idx, update_stats=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite regression loss at epoch {epoch}")
            grads = model.motion_backward(d_tx.astype(model.dtype), d_rz.astype(model.dtype), cache)
            opt.step(model.params, {k: grads[k] for k in names})
        history.append((epoch, evaluate_regression(model, samples, batch_size)))
        log.info("pretrain epoch %d: loss %.5f", epoch, history[-1][1])
    return history


# -- end to end -----------------------------------------------------------------

@dataclass
class PipelineForward:
    loss: float
    terms: dict
    psnr: list
    rect: list
    regen: list
    masks: list
    curves: list
    rows: np.ndarray
    proj: np.ndarray | None
    motion_cache: tuple = field(repr=False, default=None)
    row_cache: list = field(repr=False, default=None)
    warp_caches: list = field(repr=False, default=None)
    results: list = field(repr=False, default=None)


def pipeline_forward(model, rs, gs, weights=None, smoothing=True, degree=3, train=True,
                     update_stats=True, masks=None):
    """Forward pass of the whole network on a batch; ``loss`` is the batch mean."""
    weights = weights or LossWeights()
    rs = np.asarray(rs, dtype=model.dtype)
    gs = np.asarray(gs, dtype=model.dtype)
    n = rs.shape[0]
    tx, rz, mcache = model.motion_forward(rs, train, update_stats)
    proj = projection_matrix(model.r, degree, model.dtype) if smoothing else None
    if proj is not None:
        tx, rz = tx @ proj, rz @ proj
    rows, rcache = model.row_forward(rs, train, update_stats)
    if not (np.all(np.isfinite(tx)) and np.all(np.isfinite(rz)) and np.all(np.isfinite(rows))):
        raise TrainingDiverged("network produced non-finite outputs")
    out = PipelineForward(0.0, dict.fromkeys(TERMS, 0.0), [], [], [], [], [], rows, proj,
                          mcache, rcache, [], [])
    for b in range(n):
        curve = MotionCurve(tx[b], rz[b])
        rect, _, c_rect = rectify_ts(rs[b], curve, rows[b], return_cache=True)
        regen, _, c_reg = warp_rs_from_gs(gs[b], curve, return_cache=True)
        res = total_loss(rs[b], gs[b], rect, regen, weights, None if masks is None else masks[b])
        out.loss += res.total / n
        for k in TERMS:
            out.terms[k] += res.terms[k] / n
        out.psnr.append(masked_psnr(rect, gs[b], res.masks["rec"]))
        out.rect.append(rect)
        out.regen.append(regen)
        out.masks.append(res.masks)
        out.curves.append(curve)
        out.warp_caches.append((c_rect, c_reg))
        out.results.append(res)
    return out


def pipeline_backward(model, fwd, probe=None):
    """Parameter gradients of ``fwd.loss``.  Masks are constants.

    If ``probe`` is a dict it receives the motion gradient that arrived
    through the regeneration branch alone.
    """
    n = len(fwd.results)
    r = model.r
    d_tx = np.zeros((n, r), dtype=model.dtype)
    d_rz = np.zeros((n, r), dtype=model.dtype)
    d_rows = np.zeros((n, r, r), dtype=model.dtype)
    reg_tx = np.zeros_like(d_tx)
    reg_rz = np.zeros_like(d_rz)
    scale = model.dtype(1.0 / n)
    for b, (res, (c_rect, c_reg)) in enumerate(zip(fwd.results, fwd.warp_caches)):
        a_tx, a_rz, d_rows[b] = warp_bwd(res.grad_rect * scale, c_rect)
        reg_tx[b], reg_rz[b] = warp_bwd(res.grad_regen * scale, c_reg)
        d_tx[b] = a_tx + reg_tx[b]
        d_rz[b] = a_rz + reg_rz[b]
    if probe is not None:
        probe["regen_tx"] = reg_tx
        probe["regen_rz"] = reg_rz
    if fwd.proj is not None:
        d_tx = d_tx @ fwd.proj.T
        d_rz = d_rz @ fwd.proj.T
    grads = model.motion_backward(d_tx, d_rz, fwd.motion_cache)
    grads.update(model.row_backward(d_rows, fwd.row_cache))
    return grads


def evaluate_pipeline(model, samples, batch_size=4, weights=None, smoothing=True, degree=3):
    """Mean loss terms and PSNR over ``samples`` without touching any state."""
    acc = dict.fromkeys(("L_total",) + TERMS, 0.0)
    psnr = []
    for idx in batches(len(samples), batch_size):
        fwd = pipeline_forward(model, np.stack([samples[i].rs for i in idx]), np.stack([samples[i].gs for i in idx]),
                               weights, smoothing, degree, train=True, update_stats=False)
        acc["L_total"] += fwd.loss * len(idx)
        for k in TERMS:
            acc[k] += fwd.terms[k] * len(idx)
        psnr += fwd.psnr
    out = {k: v / len(samples) for k, v in acc.items()}
    out["psnr_masked"] = float(np.mean(psnr))
    return out


METRIC_FIELDS = ("epoch", "step", "L_total", "L_rec_mse", "L_reg_mse", "L_rec_edge", "L_reg_edge", "psnr_masked")


def _metric_row(epoch, step, m):
    return {"epoch": epoch, "step": step, "L_total": m["L_total"], "L_rec_mse": m["rec_mse"],
            "L_reg_mse": m["reg_mse"], "L_rec_edge": m["rec_edge"], "L_reg_edge": m["reg_edge"],
            "psnr_masked": m["psnr_masked"]}


@dataclass
class TrainResult:
    metrics: list
    initial_loss: float
    final_loss: float
    epochs_run: int
    stopped_early: bool = False

    @property
    def reduction(self):
        return 1.0 - self.final_loss / self.initial_loss if self.initial_loss > 0 else 0.0


def train_end_to_end(model, samples, epochs, weights=None, batch_size=4, optimizer=None, seed=0,
                     smoothing=True, degree=3, stop_at_reduction=None, on_epoch=None):
    """Train both blocks on the weighted four-term loss.

    Each metrics row holds the epoch-mean training loss terms and masked
    PSNR; row 0 is an evaluation pass before any update.  With
    ``stop_at_reduction`` the loop ends once the epoch loss has fallen by
    that fraction.  A non-finite loss restores the last good parameters and
    raises :class:`TrainingDiverged`.
    """
    samples = list(samples)
    weights = weights or LossWeights()
    opt = optimizer or Adam()
    rng = np.random.default_rng(seed)
    m0 = evaluate_pipeline(model, samples, batch_size, weights, smoothing, degree)
    metrics = [_metric_row(0, 0, m0)]
    initial = m0["L_total"]
    step = 0
    last_good = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
    final = initial
    stopped = False
    epoch = 0
    for epoch in range(1, epochs + 1):
        acc = dict.fromkeys(("L_total",) + TERMS, 0.0)
        psnr = []
        for idx in batches(len(samples), batch_size, rng):
            try:
                fwd = pipeline_forward(model, np.stack([samples[i].rs for i in idx]),
                                       np.stack([samples[i].gs for i in idx]), weights, smoothing, degree)
                if not math.isfinite(fwd.loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step + 1}")
                grads = pipeline_backward(model, fwd)
                opt.step(model.params, grads)
            except (TrainingDiverged, FloatingPointError) as exc:
                model.params, model.buffers = last_good
                raise TrainingDiverged(str(exc)) from exc
            step += 1
            if step % 10 == 0:
                last_good = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
            acc["L_total"] += fwd.loss * len(idx)
            for k in TERMS:
                acc[k] += fwd.terms[k] * len(idx)
            psnr += fwd.psnr
        m = {k: v / len(samples) for k, v in acc.items()}
        m["psnr_masked"] = float(np.mean(psnr))
        metrics.append(_metric_row(epoch, step, m))
        final = m["L_total"]
        log.info("epoch %d: L_total %.5f  psnr %.2f dB", epoch, final, m["psnr_masked"])
        if on_epoch is not None:
            on_epoch(epoch, metrics[-1])
        if stop_at_reduction is not None and final <= (1.0 - stop_at_reduction) * initial:
            stopped = True
            break
    return TrainResult(metrics, initial, final, epoch, stopped)
