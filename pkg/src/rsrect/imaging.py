"""Images, centered pixel coordinates, bilinear resampling and the per-row
rolling-shutter warps.

Conventions
-----------
Images are ``(H, W, C)`` float arrays with intensities in ``[0, 1]``.  The
first axis is the readout (scanline) axis and is called ``x``; the second
axis is the in-row axis ``y``.  Both are measured in pixels from the image
center, so array index ``i`` corresponds to ``x = i - (H - 1) / 2``.

A pixel whose channels are all exactly zero is treated as "not observed";
masks are derived from that rule everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .motion import MotionCurve


def check_image(img, name="image"):
    """Validate and return ``img`` as a 3-D float array."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"{name} must be HxWxC with C in (1, 3), got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise TypeError(f"{name} must hold floating point intensities, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains NaN or Inf")
    return img


def center(n):
    return (n - 1) / 2.0


def to_index(x, y, shape):
    """Centered (x, y) -> fractional array indices (i, j)."""
    return x + center(shape[0]), y + center(shape[1])


def to_centered(i, j, shape):
    return i - center(shape[0]), j - center(shape[1])


def pixel_grid(shape, dtype=np.float64):
    """Centered coordinates of every integer pixel, each of shape (H, W)."""
    h, w = shape[:2]
    x = (np.arange(h) - center(h)).astype(dtype)
    y = (np.arange(w) - center(w)).astype(dtype)
    return np.broadcast_to(x[:, None], (h, w)), np.broadcast_to(y[None, :], (h, w))


def visibility_mask(img):
    """1 where any channel is nonzero, 0 where every channel is exactly zero."""
    return np.any(img != 0, axis=-1).astype(img.dtype)


# -- bilinear resampling ------------------------------------------------------

@dataclass
class BilinearTaps:
    """Sampled values plus their derivatives w.r.t. the fractional indices."""
    values: np.ndarray
    d_di: np.ndarray
    d_dj: np.ndarray


def _fetch(img, ii, jj):
    h, w = img.shape[:2]
    inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
    v = img[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)]
    return np.where(inside[..., None], v, img.dtype.type(0))


def sample_indices(img, fi, fj, with_grad=False):
    """Bilinearly sample ``img`` at fractional array indices.

    Taps outside the image contribute zero, so the result is the bilinear
    interpolant of the zero-extended image.  ``fi``/``fj`` may have any
    (matching) shape; the result has that shape plus a channel axis.
    """
    fi = np.asarray(fi, dtype=img.dtype)
    fj = np.asarray(fj, dtype=img.dtype)
    fi0 = np.floor(fi)
    fj0 = np.floor(fj)
    di = (fi - fi0)[..., None]
    dj = (fj - fj0)[..., None]
    i0 = fi0.astype(np.intp)
    j0 = fj0.astype(np.intp)
    v00 = _fetch(img, i0, j0)
    v01 = _fetch(img, i0, j0 + 1)
    v10 = _fetch(img, i0 + 1, j0)
    v11 = _fetch(img, i0 + 1, j0 + 1)
    one = img.dtype.type(1)
    values = ((one - di) * (one - dj) * v00 + (one - di) * dj * v01
              + di * (one - dj) * v10 + di * dj * v11)
    if not with_grad:
        return values
    d_di = (one - dj) * (v10 - v00) + dj * (v11 - v01)
    d_dj = (one - di) * (v01 - v00) + di * (v11 - v10)
    return BilinearTaps(values, d_di, d_dj)


def bilinear_sample(img, x, y):
    """Sample ``img`` at centered coordinate(s) ``(x, y)``."""
    img = check_image(img)
    fi, fj = to_index(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), img.shape)
    return sample_indices(img, fi, fj)


def inside_hull(fi, fj, shape):
    """True where ``(fi, fj)`` lies in ``[0, H-1] x [0, W-1]``.

    Exactly these points have every nonzero-weight tap inside the image.
    The warps zero everything else: a sample blended with the zero fill is
    neither data nor detectably missing.
    """
    h, w = shape[:2]
    return (fi >= 0) & (fi <= h - 1) & (fj >= 0) & (fj <= w - 1)


def taps_visible(vis, fi, fj):
    """True where every nonzero-weight bilinear tap at ``(fi, fj)`` lands on a
    visible pixel of ``vis`` (an ``H x W`` boolean map; outside counts as not
    visible)."""
    vis = np.asarray(vis, dtype=bool)
    h, w = vis.shape
    i0 = np.floor(fi).astype(np.intp)
    j0 = np.floor(fj).astype(np.intp)
    need_i = fi > i0
    need_j = fj > j0

    def at(ii, jj):
        inside = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        return inside & vis[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)]

    ok = at(i0, j0)
    ok &= ~need_j | at(i0, j0 + 1)
    ok &= ~need_i | at(i0 + 1, j0)
    ok &= ~(need_i & need_j) | at(i0 + 1, j0 + 1)
    return ok


# -- the row-motion model -----------------------------------------------------

def row_motion_forward(x_gs, y_gs, t_x, r_z):
    """GS -> RS coordinates under one row's motion."""
    c, s = np.cos(r_z), np.sin(r_z)
    return x_gs * c - y_gs * s + t_x, x_gs * s + y_gs * c


def row_motion_inverse(x_rs, y_rs, t_x, r_z):
    """RS -> GS coordinates; the exact inverse of :func:`row_motion_forward`."""
    c, s = np.cos(r_z), np.sin(r_z)
    u = x_rs - t_x
    return u * c + y_rs * s, -u * s + y_rs * c


@dataclass
class WarpCache:
    """Geometry recorded by a forward warp, consumed by ``nn.warp_grad``."""
    kind: str
    taps: BilinearTaps
    x_src: np.ndarray  # centered source coordinates, (H, W)
    y_src: np.ndarray
    x_dst: np.ndarray  # centered target coordinates, (H, W)
    y_dst: np.ndarray
    t_x: np.ndarray    # per-pixel motion actually applied, (H, W)
    r_z: np.ndarray
    rows: np.ndarray | None = None   # row map (rectification only)
    valid: np.ndarray | None = None
    curve: MotionCurve | None = None


def _check_motion(img, motion):
    if not isinstance(motion, MotionCurve):
        raise TypeError("motion must be a MotionCurve")
    if motion.r != img.shape[0]:
        raise ValueError(f"motion has {motion.r} rows but image has {img.shape[0]}")


def warp_rs_from_gs(gs, motion, return_cache=False):
    """Synthesize the RS image seen under ``motion`` by gathering from ``gs``.

    Every RS pixel uses the motion of its own row, is mapped back into the GS
    frame and bilinearly sampled there.  Returns ``(rs, mask)`` and, when
    asked, a :class:`WarpCache` for back-propagation.
    """
    gs = check_image(gs, "gs")
    _check_motion(gs, motion)
    dtype = gs.dtype
    x, y = pixel_grid(gs.shape, dtype)
    tx = np.broadcast_to(motion.tx.astype(dtype)[:, None], x.shape)
    rz = np.broadcast_to(motion.rz.astype(dtype)[:, None], x.shape)
    xs, ys = row_motion_inverse(x, y, tx, rz)
    fi, fj = to_index(xs, ys, gs.shape)
    ok = inside_hull(fi, fj, gs.shape)
    taps = sample_indices(gs, fi, fj, with_grad=return_cache)
    vals = taps.values if return_cache else taps
    rs = np.where(ok[..., None], vals, dtype.type(0))
    mask = visibility_mask(rs)
    if not return_cache:
        return rs, mask
    return rs, mask, WarpCache("regen", taps, xs, ys, x, y, tx, rz, valid=ok, curve=motion)


def scatter_st_rectify(rs, motion):
    """Forward-map every RS pixel into the GS frame (nearest target pixel).

    Targets hit by several sources keep the last writer in row-major scan
    order.  Returns ``(gs_est, holes)`` with ``holes`` True where nothing
    landed.
    """
    rs = check_image(rs, "rs")
    _check_motion(rs, motion)
    h, w = rs.shape[:2]
    x, y = pixel_grid(rs.shape, np.float64)
    tx = motion.tx.astype(np.float64)[:, None]
    rz = motion.rz.astype(np.float64)[:, None]
    xg, yg = row_motion_inverse(x, y, tx, rz)
    fi, fj = to_index(xg, yg, rs.shape)
    ti = np.floor(fi + 0.5).astype(np.intp).ravel()
    tj = np.floor(fj + 0.5).astype(np.intp).ravel()
    src = np.arange(h * w)
    keep = (ti >= 0) & (ti < h) & (tj >= 0) & (tj < w)
    flat = (ti * w + tj)[keep]
    src = src[keep]
    # last occurrence in scan order wins
    _, first_rev = np.unique(flat[::-1], return_index=True)
    last = len(flat) - 1 - first_rev
    out = np.zeros_like(rs).reshape(h * w, -1)
    out[flat[last]] = rs.reshape(h * w, -1)[src[last]]
    filled = np.zeros(h * w, dtype=bool)
    filled[flat] = True
    return out.reshape(rs.shape), ~filled.reshape(h, w)


# -- metrics and files --------------------------------------------------------

def masked_psnr(pred, ref, mask=None, peak=1.0):
    """PSNR (dB) over the pixels where ``mask`` is nonzero."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if mask is None:
        mask = visibility_mask(pred)
    m = np.asarray(mask) > 0
    if not m.any():
        return float("nan")
    err = np.mean((pred[m] - ref[m]) ** 2)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / err))


def load_png(path):
    """Load an 8-bit PNG as float64 in [0, 1].

    All-zero pixels read back as unobserved, matching how the warps write
    holes.
    """
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def to_uint8(img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img):
    """Clamp to [0, 1], quantize round-half-up and write an 8-bit PNG."""
    arr = to_uint8(check_image(np.asarray(img, dtype=np.float64)))
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)


def save_mask(path, mask):
    PILImage.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def center_crop(img, size):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"cannot crop {h}x{w} to {size}x{size}")
    i0 = (h - size) // 2
    j0 = (w - size) // 2
    return img[i0:i0 + size, j0:j0 + size]
