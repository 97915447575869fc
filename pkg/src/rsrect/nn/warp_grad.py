"""Reverse-mode derivatives of the two warps.

Both warps are bilinear sampling composed with the per-row rigid map, so the
chain is: upstream image gradient -> gradient w.r.t. the fractional sample
position -> gradient w.r.t. the motion (and, for rectification, the row
map).  Pixels that the forward pass zeroed contribute nothing.
"""

import numpy as np

from ..motion import _row_weights


def _position_grads(grad_out, cache):
    if cache is None:
        raise ValueError("warp_bwd needs the cache recorded by the forward warp")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != cache.taps.values.shape:
        raise ValueError(f"gradient shape {grad_out.shape} != warp output {cache.taps.values.shape}")
    gi = np.sum(grad_out * cache.taps.d_di, axis=-1)
    gj = np.sum(grad_out * cache.taps.d_dj, axis=-1)
    if cache.valid is not None:
        gi = np.where(cache.valid, gi, 0)
        gj = np.where(cache.valid, gj, 0)
    return gi, gj


def warp_bwd(grad_out, cache):
    """Gradients of a scalar loss w.r.t. the warp's motion inputs.

    For a regeneration warp (GS -> RS) returns ``(d_tx, d_rz)``, one value
    per row.  For a rectification warp returns ``(d_tx, d_rz, d_rows)`` where
    ``d_rows`` is per target pixel; motion gradients are scattered to the two
    curve rows each row-map entry interpolates between.
    """
    gi, gj = _position_grads(grad_out, cache)
    c, s = np.cos(cache.r_z), np.sin(cache.r_z)
    if cache.kind == "regen":
        d_tx = -gi * c + gj * s
        d_rz = gi * cache.y_src - gj * cache.x_src
        return d_tx.sum(axis=1), d_rz.sum(axis=1)
    if cache.kind != "rect":
        raise ValueError(f"unknown warp kind {cache.kind!r}")
    d_tx = gi
    d_rz = -gi * cache.y_src + gj * (cache.x_src - cache.t_x)
    curve = cache.curve
    r = curve.r
    k, f = _row_weights(cache.rows, r)
    k = k.ravel()
    f = f.ravel()
    dt = d_tx.ravel()
    dr = d_rz.ravel()
    g_tx = np.bincount(k, (1 - f) * dt, r) + np.bincount(k + 1, f * dt, r)
    g_rz = np.bincount(k, (1 - f) * dr, r) + np.bincount(k + 1, f * dr, r)
    slope_t = (curve.tx[k + 1] - curve.tx[k]).reshape(cache.rows.shape)
    slope_r = (curve.rz[k + 1] - curve.rz[k]).reshape(cache.rows.shape)
    interior = (cache.rows > 0) & (cache.rows < r - 1)
    d_rows = np.where(interior, d_tx * slope_t + d_rz * slope_r, 0)
    dtype = cache.taps.values.dtype
    return g_tx.astype(dtype), g_rz.astype(dtype), d_rows.astype(dtype)
