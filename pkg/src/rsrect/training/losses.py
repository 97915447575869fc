"""Masked reconstruction losses on images and on their Sobel edges."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter

from ..imaging import visibility_mask

SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_V = SOBEL_H.T


def _correlate3(img, k):
    h, w = img.shape[:2]
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(img)
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0:
                out += img.dtype.type(k[a, b]) * p[a:a + h, b:b + w]
    return out


def sobel_edges(img):
    """Horizontal then vertical 3x3 Sobel responses per channel (zero padded),
    stacked to ``2 * C`` channels."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.concatenate([_correlate3(img, SOBEL_H), _correlate3(img, SOBEL_V)], axis=-1)


def sobel_edges_adjoint(grad):
    """Transpose of :func:`sobel_edges` (maps a ``2C``-channel gradient back)."""
    c = grad.shape[-1] // 2
    return (_correlate3(grad[..., :c], SOBEL_H[::-1, ::-1])
            + _correlate3(grad[..., c:], SOBEL_V[::-1, ::-1]))


def masked_mse(pred, target, mask):
    """``mean((pred - mask * target)^2)`` and its gradient w.r.t. ``pred``.

    The mask is a constant here; the mean runs over pixels and channels.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.asarray(mask, dtype=pred.dtype)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {pred.shape[:2]}")
    diff = pred - mask[..., None] * target
    n = diff.size
    return float(np.sum(diff.astype(np.float64) ** 2) / n), (2.0 / n) * diff


def edge_mask(mask):
    """Pixels whose whole 3x3 Sobel stencil is visible (the frame border counts
    as visible, since both operands see the same zero padding there)."""
    return minimum_filter(np.asarray(mask), size=3, mode="constant", cval=1)


def edge_loss(pred, target, mask, mode="eroded"):
    """Masked MSE between Sobel responses; gradient returned w.r.t. ``pred``.

    ``mode="eroded"`` compares both responses on :func:`edge_mask` only.
    ``mode="literal"`` compares the full response of ``pred`` against the
    masked response of ``target``, which also scores the artificial step
    from valid pixels into zero-filled holes.
    """
    e_pred = sobel_edges(pred)
    if mode == "literal":
        loss, g = masked_mse(e_pred, sobel_edges(target), mask)
        return loss, sobel_edges_adjoint(g)
    if mode != "eroded":
        raise ValueError(f"unknown edge mask mode {mode!r}")
    me = edge_mask(mask).astype(e_pred.dtype)[..., None]
    loss, g = masked_mse(me * e_pred, sobel_edges(target), me[..., 0])
    return loss, sobel_edges_adjoint(me * g)


@dataclass
class LossWeights:
    rec_mse: float = 1.0
    reg_mse: float = 1.0
    rec_edge: float = 0.5
    reg_edge: float = 0.5

    def __post_init__(self):
        if min(self.rec_mse, self.reg_mse, self.rec_edge, self.reg_edge) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossResult:
    total: float
    terms: dict
    grad_rect: np.ndarray
    grad_regen: np.ndarray
    masks: dict = field(repr=False, default_factory=dict)


def total_loss(rs, gs, rect, regen, weights=None, masks=None, edge_mode="eroded"):
    """Weighted sum of the four masked terms with gradients for both branches.

    ``rect`` is the rectified estimate of ``gs``; ``regen`` is ``gs``
    re-distorted by the estimated motion, compared against ``rs``.  Masks
    default to the nonzero pixels of ``rect`` and ``regen``.
    """
    weights = weights or LossWeights()
    shapes = {a.shape for a in (rs, gs, rect, regen)}
    if len(shapes) != 1:
        raise ValueError(f"all four images must share a shape, got {sorted(shapes)}")
    if masks is None:
        masks = {"rec": visibility_mask(rect), "reg": visibility_mask(regen)}
    m_rec, m_reg = masks["rec"], masks["reg"]
    terms, grads = {}, {}
    terms["rec_mse"], grads["rec_mse"] = masked_mse(rect, gs, m_rec)
    terms["reg_mse"], grads["reg_mse"] = masked_mse(regen, rs, m_reg)
    terms["rec_edge"], grads["rec_edge"] = edge_loss(rect, gs, m_rec, edge_mode)
    terms["reg_edge"], grads["reg_edge"] = edge_loss(regen, rs, m_reg, edge_mode)
    w = {"rec_mse": weights.rec_mse, "reg_mse": weights.reg_mse,
         "rec_edge": weights.rec_edge, "reg_edge": weights.reg_edge}
    total = sum(w[k] * terms[k] for k in terms)
    dt = rect.dtype.type
    g_rect = dt(w["rec_mse"]) * grads["rec_mse"] + dt(w["rec_edge"]) * grads["rec_edge"]
    g_regen = dt(w["reg_mse"]) * grads["reg_mse"] + dt(w["reg_edge"]) * grads["reg_edge"]
    return LossResult(total, terms, g_rect, g_regen, masks)
