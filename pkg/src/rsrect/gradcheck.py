"""Central finite-difference checks for every differentiable piece.

Each check builds a small random instance, contracts the op's output with a
fixed random weight tensor to get a scalar (reduced in float64), and compares
the analytic gradient against central differences.  Bilinear sampling is
only piecewise smooth, so warp instances are redrawn until no sample point
comes within one step of a lattice line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import sample_indices, to_index, warp_rs_from_gs
from .motion import MotionCurve, projection_matrix
from .nn import layers as L
from .nn.model import RSNet
from .nn.warp_grad import warp_bwd
from .rectifier import rectify_ts
from .training.losses import edge_loss, masked_mse, total_loss

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}
STEP = {np.float32: 1e-2, np.float64: 1e-6}
WARP_STEP = {np.float32: 2e-3, np.float64: 1e-6}


@dataclass
class CheckResult:
    name: str
    dtype: str
    rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self):
        return bool(self.rel_err < self.tol)

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.dtype:8s} {self.name:34s} rel_err={self.rel_err:.3e} (tol {self.tol:g}, n={self.n_checked})"


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def contract(out, weight):
    return float(np.sum(np.asarray(out, dtype=np.float64) * weight))


def numeric_grad(f, x, h, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries ``idx`` of array ``x``
    (perturbed in place and restored)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if idx is None else idx
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + x.dtype.type(h)
        hi = (flat[i] - old).astype(np.float64) if x.dtype != np.float64 else h
        fp = f()
        flat[i] = old - x.dtype.type(h)
        lo = (old - flat[i]).astype(np.float64) if x.dtype != np.float64 else h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (hi + lo)
    return out


def _pick(rng, size, limit):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def _result(name, dtype, analytic, numeric):
    return CheckResult(name, np.dtype(dtype).name, rel_error(analytic, numeric), TOLERANCE[dtype], int(np.size(numeric)))


# -- layers -------------------------------------------------------------------

def check_conv(dtype, rng):
    out = []
    for stride in (1, 2):
        x = rng.normal(size=(2, 6, 6, 2)).astype(dtype)
        w = rng.normal(size=(3, 3, 2, 3)).astype(dtype)
        b = rng.normal(size=3).astype(dtype)
        y, cache = L.conv2d_fwd(x, w, b, stride)
        wt = rng.normal(size=y.shape)
        dx, dw, db = L.conv2d_bwd(wt.astype(dtype), cache)
        f = lambda: contract(L.conv2d_fwd(x, w, b, stride)[0], wt)
        h = STEP[dtype]
        out += [_result(f"conv2d/s{stride} d_input", dtype, dx, numeric_grad(f, x, h)),
                _result(f"conv2d/s{stride} d_kernel", dtype, dw, numeric_grad(f, w, h)),
                _result(f"conv2d/s{stride} d_bias", dtype, db, numeric_grad(f, b, h))]
    return out


def check_batchnorm(dtype, rng):
    out = []
    for train in (True, False):
        x = (rng.normal(size=(2, 4, 4, 3)) * 2 + 0.5).astype(dtype)
        g = rng.uniform(0.5, 1.5, 3).astype(dtype)
        be = rng.normal(size=3).astype(dtype)
        rm = rng.normal(size=3).astype(dtype)
        rv = rng.uniform(0.5, 2, 3).astype(dtype)

        def fwd():
            return L.batchnorm_fwd(x, g, be, rm, rv, train, update_stats=False)

        y, cache = fwd()
        wt = rng.normal(size=y.shape)
        dx, dg, db = L.batchnorm_bwd(wt.astype(dtype), cache)
        f = lambda: contract(fwd()[0], wt)
        h = STEP[dtype]
        tag = "train" if train else "infer"
        out += [_result(f"batchnorm/{tag} d_input", dtype, dx, numeric_grad(f, x, h)),
                _result(f"batchnorm/{tag} d_gamma", dtype, dg, numeric_grad(f, g, h)),
                _result(f"batchnorm/{tag} d_beta", dtype, db, numeric_grad(f, be, h))]
    return out


def check_fc(dtype, rng):
    x = rng.normal(size=(3, 5)).astype(dtype)
    w = rng.normal(size=(5, 4)).astype(dtype)
    b = rng.normal(size=4).astype(dtype)
    y, cache = L.fc_fwd(x, w, b)
    wt = rng.normal(size=y.shape)
    dx, dw, db = L.fc_bwd(wt.astype(dtype), cache)
    f = lambda: contract(L.fc_fwd(x, w, b)[0], wt)
    h = STEP[dtype]
    return [_result("fc d_input", dtype, dx, numeric_grad(f, x, h)),
            _result("fc d_weight", dtype, dw, numeric_grad(f, w, h)),
            _result("fc d_bias", dtype, db, numeric_grad(f, b, h))]


def check_relu(dtype, rng):
    h = STEP[dtype]
    x = rng.normal(size=(2, 4, 4, 2))
    x = (np.sign(x) * (np.abs(x) + 10 * h)).astype(dtype)  # keep clear of the kink
    y, cache = L.relu_fwd(x)
    wt = rng.normal(size=y.shape)
    dx = L.relu_bwd(wt.astype(dtype), cache)
    f = lambda: contract(L.relu_fwd(x)[0], wt)
    return [_result("relu d_input", dtype, dx, numeric_grad(f, x, h))]


# -- warps --------------------------------------------------------------------

def _lattice_clear(fi, fj, margin):
    d = np.minimum(np.abs(fi - np.round(fi)), np.abs(fj - np.round(fj)))
    return bool(np.all(d > margin))


def _warp_instance(dtype, rng, size, kind):
    h = WARP_STEP[dtype]
    reach = size * 0.75
    for _ in range(10000):
        img = rng.uniform(0.1, 1.0, (size, size, 3)).astype(dtype)
        curve = MotionCurve(rng.uniform(-1.5, 1.5, size).astype(dtype),
                            rng.uniform(-0.12, 0.12, size).astype(dtype))
        if kind == "regen":
            _, _, cache = warp_rs_from_gs(img, curve, return_cache=True)
            rows = None
            margin = 2 * h
        else:
            rows = (np.arange(size)[:, None] + rng.uniform(-0.8, 0.8, (size, size)))
            rows = np.clip(rows, 0.05, size - 1.05).astype(dtype)
            if np.any(np.abs(rows - np.round(rows)) < 2 * h):
                continue
            _, _, cache = rectify_ts(img, curve, rows, return_cache=True)
            slope = np.max(np.abs(np.diff(curve.tx))) + reach * np.max(np.abs(np.diff(curve.rz)))
            margin = 2 * h * max(1.0, slope)
        fi, fj = to_index(cache.x_src, cache.y_src, img.shape)
        if _lattice_clear(fi, fj, margin):
            return img, curve, rows
    raise RuntimeError("could not draw an off-lattice warp instance")


def check_warps(dtype, rng):
    size = 8 if dtype == np.float32 else 16
    h = WARP_STEP[dtype]
    hr = h / (size * 0.75)  # rotation step scaled so no sample moves more than h
    out = []

    img, curve, _ = _warp_instance(dtype, rng, size, "regen")
    y, _, cache = warp_rs_from_gs(img, curve, return_cache=True)
    wt = rng.normal(size=y.shape)
    g_tx, g_rz = warp_bwd(wt.astype(dtype), cache)
    f = lambda: contract(warp_rs_from_gs(img, curve)[0], wt)
    out += [_result("warp_rs_from_gs d_tx", dtype, g_tx, numeric_grad(f, curve.tx, h)),
            _result("warp_rs_from_gs d_rz", dtype, g_rz, numeric_grad(f, curve.rz, hr))]

    img, curve, rows = _warp_instance(dtype, rng, size, "rect")
    y, _, cache = rectify_ts(img, curve, rows, return_cache=True)
    wt = rng.normal(size=y.shape)
    g_tx, g_rz, g_rows = warp_bwd(wt.astype(dtype), cache)
    f = lambda: contract(rectify_ts(img, curve, rows)[0], wt)
    out += [_result("rectify_ts d_tx", dtype, g_tx, numeric_grad(f, curve.tx, h)),
            _result("rectify_ts d_rz", dtype, g_rz, numeric_grad(f, curve.rz, hr)),
            _result("rectify_ts d_rowmap", dtype, g_rows, numeric_grad(f, rows, h))]
    return out


def check_bilinear(dtype, rng):
    """Derivative of the sampler itself w.r.t. the sample position."""
    img = rng.uniform(0, 1, (6, 6, 3)).astype(dtype)
    h = WARP_STEP[dtype]
    while True:
        fi = rng.uniform(-0.9, 5.9, 20).astype(dtype)
        fj = rng.uniform(-0.9, 5.9, 20).astype(dtype)
        if _lattice_clear(fi, fj, 2 * h):
            break
    taps = sample_indices(img, fi, fj, with_grad=True)
    wt = rng.normal(size=taps.values.shape)
    gi = np.sum(wt * taps.d_di, axis=-1)
    gj = np.sum(wt * taps.d_dj, axis=-1)
    f = lambda: contract(sample_indices(img, fi, fj), wt)
    return [_result("bilinear d_position_i", dtype, gi, numeric_grad(f, fi, h)),
            _result("bilinear d_position_j", dtype, gj, numeric_grad(f, fj, h))]


# -- losses and trajectory ----------------------------------------------------

def _loss_images(dtype, rng, size=8):
    imgs = [rng.uniform(0.05, 1, (size, size, 3)).astype(dtype) for _ in range(4)]
    imgs[2][:2] = 0  # some unobserved rows so the masks matter
    imgs[3][:, -1] = 0
    return imgs


def check_losses(dtype, rng):
    rs, gs, rect, regen = _loss_images(dtype, rng)
    m = np.any(rect != 0, axis=-1).astype(dtype)
    h = STEP[dtype]
    out = []
    _, g = masked_mse(rect, gs, m)
    f = lambda: masked_mse(rect, gs, m)[0]
    out.append(_result("masked_mse d_pred", dtype, g, numeric_grad(f, rect, h)))
    for mode in ("eroded", "literal"):
        _, g = edge_loss(rect, gs, m, mode)
        f = lambda: edge_loss(rect, gs, m, mode)[0]
        out.append(_result(f"edge_loss ({mode}) d_pred", dtype, g, numeric_grad(f, rect, h)))

    masks = {"rec": np.any(rect != 0, axis=-1).astype(dtype), "reg": np.any(regen != 0, axis=-1).astype(dtype)}
    res = total_loss(rs, gs, rect, regen, masks=masks)
    f = lambda: total_loss(rs, gs, rect, regen, masks=masks).total
    out += [_result("total_loss d_rect", dtype, res.grad_rect, numeric_grad(f, rect, h)),
            _result("total_loss d_regen", dtype, res.grad_regen, numeric_grad(f, regen, h))]
    # each of the four terms on its own, via weight zeroing
    from .training.losses import LossWeights
    for term in ("rec_mse", "reg_mse", "rec_edge", "reg_edge"):
        wts = LossWeights(**{k: (1.0 if k == term else 0.0) for k in ("rec_mse", "reg_mse", "rec_edge", "reg_edge")})
        res = total_loss(rs, gs, rect, regen, wts, masks)
        target, grad = (rect, res.grad_rect) if term.startswith("rec") else (regen, res.grad_regen)
        f = lambda: total_loss(rs, gs, rect, regen, wts, masks).total
        out.append(_result(f"loss term {term}", dtype, grad, numeric_grad(f, target, h)))
    return out


def check_projection(dtype, rng):
    r = 16
    p = projection_matrix(r, 3, dtype)
    c = rng.normal(size=r).astype(dtype)
    wt = rng.normal(size=r)
    f = lambda: contract(p @ c, wt)
    return [_result("trajectory projection", dtype, p.T @ wt.astype(dtype), numeric_grad(f, c, STEP[dtype]))]


# -- blocks and the full chain ------------------------------------------------

def _model(dtype, rng, r=16):
    model = RSNet(r, seed=int(rng.integers(1 << 30)), dtype=dtype)
    for k, v in model.params.items():
        if k.endswith((".b", ".beta")):
            model.params[k] = rng.normal(scale=0.1, size=v.shape).astype(dtype)
    return model


def check_blocks(dtype, rng, per_group=6):
    model = _model(dtype, rng)
    x = rng.uniform(0.05, 1, (2, model.r, model.r, 3)).astype(dtype)
    h = STEP[dtype] if dtype == np.float64 else 1e-3
    out = []

    tx, rz, cache = model.motion_forward(x, update_stats=False)
    w_tx, w_rz = rng.normal(size=tx.shape), rng.normal(size=rz.shape)
    grads = model.motion_backward(w_tx.astype(dtype), w_rz.astype(dtype), cache)

    def f_motion():
        a, b, _ = model.motion_forward(x, update_stats=False)
        return contract(a, w_tx) + contract(b, w_rz)

    an, nu = [], []
    for name in model.motion_param_names():
        idx = _pick(rng, model.params[name].size, per_group)
        an.append(grads[name].ravel()[idx])
        nu.append(numeric_grad(f_motion, model.params[name], h, idx))
    out.append(_result("motion block (all groups)", dtype, np.concatenate(an), np.concatenate(nu)))

    rows, cache = model.row_forward(x, update_stats=False)
    w_rows = rng.normal(size=rows.shape)
    grads = model.row_backward(w_rows.astype(dtype), cache)
    f_row = lambda: contract(model.row_forward(x, update_stats=False)[0], w_rows)
    an, nu = [], []
    for name in model.row_param_names():
        idx = _pick(rng, model.params[name].size, per_group)
        an.append(grads[name].ravel()[idx])
        nu.append(numeric_grad(f_row, model.params[name], h, idx))
    out.append(_result("row block (all groups)", dtype, np.concatenate(an), np.concatenate(nu)))
    return out


def check_pipeline(dtype, rng, per_group=3):
    """Loss -> both warps -> trajectory projection -> both blocks."""
    from .training.loop import pipeline_forward, pipeline_backward
    model = _model(dtype, rng)
    r = model.r
    gs = rng.uniform(0.1, 1, (r, r, 3))
    from scipy.ndimage import gaussian_filter
    gs = gaussian_filter(gs, (1, 1, 0)).astype(dtype)
    true = MotionCurve(np.linspace(-1, 1.5, r), np.linspace(0.02, -0.03, r))
    rs = warp_rs_from_gs(gs, true)[0].astype(dtype)
    batch = (rs[None], gs[None])
    fwd = pipeline_forward(model, *batch, update_stats=False)
    grads = pipeline_backward(model, fwd)
    masks = fwd.masks

    def f():
        return pipeline_forward(model, *batch, update_stats=False, masks=masks).loss

    h = 1e-6 if dtype == np.float64 else 1e-3
    an, nu = [], []
    for name in model.motion_param_names() + model.row_param_names():
        idx = _pick(rng, model.params[name].size, per_group)
        an.append(grads[name].ravel()[idx])
        nu.append(numeric_grad(f, model.params[name], h, idx))
    return [_result("full pipeline (loss -> params)", dtype, np.concatenate(an), np.concatenate(nu))]


CHECKS = (check_conv, check_batchnorm, check_fc, check_relu, check_bilinear, check_warps,
          check_losses, check_projection, check_blocks, check_pipeline)
# Whole blocks stack many ReLU kinks and batch reductions; in float32 their
# central differences bottom out near 5e-3 for any step, so they run in
# float64 only.
DOUBLE_ONLY = (check_blocks, check_pipeline)


def run_suite(dtypes=(np.float32, np.float64), seed=0, checks=CHECKS):
    results = []
    for dtype in dtypes:
        for check in checks:
            if dtype != np.float64 and check in DOUBLE_ONLY:
                continue
            results += check(dtype, np.random.default_rng([seed, CHECKS.index(check)]))
    return results
