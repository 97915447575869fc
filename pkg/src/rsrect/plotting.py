"""Figures for training and evaluation reports, written straight to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_COLUMNS = ("L_total", "L_rec_mse", "L_reg_mse", "L_rec_edge", "L_reg_edge")

# deterministic output: no timestamps or software tags in the files
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_losses(metrics, path):
    """Loss terms (log scale) and masked PSNR per epoch."""
    epochs = [m["epoch"] for m in metrics]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for col in LOSS_COLUMNS:
        vals = np.array([m[col] for m in metrics], dtype=float)
        ax.semilogy(epochs, np.maximum(vals, 1e-12), label=col, lw=2 if col == "L_total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax2.plot(epochs, [m["psnr_masked"] for m in metrics], color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("masked PSNR (dB)")
    return _save(fig, path)


def plot_pretrain(history, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.semilogy([e for e, _ in history], [v for _, v in history], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("regression loss")
    return _save(fig, path)


def plot_motion(curves, path, labels=None):
    """Translation (px) and rotation (deg) against row for one or more curves."""
    labels = labels or [None] * len(curves)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for c, lab in zip(curves, labels):
        rows = np.arange(c.r)
        ax.plot(rows, c.tx, label=lab)
        ax2.plot(rows, np.degrees(c.rz), label=lab)
    ax.set_xlabel("row")
    ax.set_ylabel("t_x (px)")
    ax2.set_xlabel("row")
    ax2.set_ylabel("r_z (deg)")
    if any(labels):
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_panels(images, titles, path):
    """Images side by side; single-channel inputs are drawn in gray."""
    fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.8))
    for ax, img, title in zip(np.atleast_1d(axes), images, titles):
        img = np.clip(np.asarray(img, dtype=float), 0, 1)
        if img.ndim == 3 and img.shape[2] == 1:
            img = img[..., 0]
        ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def plot_psnr_hist(values, path, threshold=None):
    vals = np.asarray(values, dtype=float)
    vals = vals[np.isfinite(vals)]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.hist(vals, bins=min(20, max(5, vals.size // 2)), color="0.5")
    if threshold is not None:
        ax.axvline(threshold, color="r", ls="--")
    ax.set_xlabel("masked PSNR (dB)")
    ax.set_ylabel("samples")
    return _save(fig, path)
