"""Rectification with known motion.

The rectified (GS) pixel at ``(x, y)`` was read out at some RS row ``x_rs``
that satisfies ``x_rs = x cos(rz(x_rs)) - y sin(rz(x_rs)) + tx(x_rs)``.  The
map from GS pixel to that fractional row is the *row map*; the learned row
block approximates it, and :func:`row_map_fixed_point` solves for it
directly.
"""

from __future__ import annotations

import struct

import numpy as np

from .imaging import (WarpCache, center, check_image, inside_hull, pixel_grid, row_motion_forward, sample_indices,
                      taps_visible, to_index, visibility_mask)
from .motion import MotionCurve, sample_motion_at


def identity_row_map(r, dtype=np.float64):
    """``A(i, j) = i``."""
    return np.broadcast_to(np.arange(r, dtype=dtype)[:, None], (r, r)).copy()


def row_map_bounds(r):
    return -r / 2.0, 3.0 * r / 2.0


def row_map_fixed_point(motion, r=None, max_iters=25, tol=1e-4):
    """Solve the per-pixel readout-row equation by fixed-point iteration.

    Starts from ``x = x_gs`` and iterates the right-hand side with motion
    looked up at the current fractional row.  Returns ``(rows, converged,
    iters)``: the row map in array-index units (clamped to the admissible
    range), a per-pixel flag that is True only if the step fell below ``tol``
    and the root lies inside the range, and the iteration count per pixel.
    """
    r = motion.r if r is None else r
    if motion.r != r:
        raise ValueError(f"motion has {motion.r} rows, expected {r}")
    if max_iters < 1 or tol <= 0:
        raise ValueError("max_iters must be >= 1 and tol > 0")
    x_gs, y_gs = pixel_grid((r, r), np.float64)
    c = center(r)
    x = x_gs.copy()
    done = np.zeros((r, r), dtype=bool)
    iters = np.zeros((r, r), dtype=np.int32)
    for _ in range(max_iters):
        act = ~done
        if not act.any():
            break
        tx, rz = sample_motion_at(motion, x[act] + c)
        x_new, _ = row_motion_forward(x_gs[act], y_gs[act], tx, rz)
        step = np.abs(x_new - x[act])
        x[act] = x_new
        iters[act] += 1
        done[act] = step < tol
    rows = x + c
    lo, hi = row_map_bounds(r)
    inside = (rows > lo) & (rows < hi)
    return np.clip(rows, lo, hi), done & inside, iters


def rectify_ts(rs, motion, rows, valid=None, return_cache=False):
    """Gather the rectified image from ``rs`` using a row map.

    Each target pixel takes the motion at its (fractional) row-map entry,
    is pushed through the forward row-motion map into the RS frame and
    bilinearly sampled.  Pixels flagged invalid, whose row-map entry is
    outside the admissible range, or whose sample would draw on an
    unobserved (all-zero) RS pixel come out as zero.
    """
    rs = check_image(rs, "rs")
    h, w = rs.shape[:2]
    if not isinstance(motion, MotionCurve) or motion.r != h:
        raise ValueError(f"motion must be a MotionCurve with {h} rows")
    rows = np.asarray(rows)
    if rows.shape != (h, w):
        raise ValueError(f"row map shape {rows.shape} does not match image {(h, w)}")
    dtype = rs.dtype
    rows = rows.astype(dtype, copy=False)
    lo, hi = row_map_bounds(h)
    ok = (rows > lo) & (rows < hi)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    m = motion.astype(dtype)
    tx, rz = sample_motion_at(m, rows)
    tx = tx.astype(dtype, copy=False)
    rz = rz.astype(dtype, copy=False)
    x, y = pixel_grid(rs.shape, dtype)
    xs, ys = row_motion_forward(x, y, tx, rz)
    fi, fj = to_index(xs, ys, rs.shape)
    ok &= inside_hull(fi, fj, rs.shape)
    # unobserved (all-zero) RS pixels are holes, not black data
    vis = visibility_mask(rs).astype(bool)
    if not vis.all():
        ok &= taps_visible(vis, fi, fj)
    taps = sample_indices(rs, fi, fj, with_grad=return_cache)
    vals = taps.values if return_cache else taps
    rect = np.where(ok[..., None], vals, dtype.type(0))
    mask = visibility_mask(rect)
    if not return_cache:
        return rect, mask
    return rect, mask, WarpCache("rect", taps, xs, ys, x, y, tx, rz, rows=rows, valid=ok, curve=m)


def rectify_known_motion(rs, motion, max_iters=25, tol=1e-4):
    """Analytic rectification: fixed-point row map followed by the gather."""
    rows, conv, _ = row_map_fixed_point(motion, rs.shape[0], max_iters, tol)
    return rectify_ts(rs, motion, rows, conv)


# -- row map files ------------------------------------------------------------

_MAGIC = b"RMAP"


def write_row_map(path, rows):
    rows = np.asarray(rows)
    r = rows.shape[0]
    if rows.shape != (r, r) or r > 0xFFFF:
        raise ValueError(f"row map must be square with side < 65536, got {rows.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<HH", r, 0))
        fh.write(rows.astype("<f4").tobytes())


def read_row_map(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8 or head[:4] != _MAGIC:
            raise ValueError(f"{path}: not a row map file")
        r, _ = struct.unpack("<HH", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != r * r:
        raise ValueError(f"{path}: expected {r * r} values, found {data.size}")
    return data.reshape(r, r).astype(np.float32)

