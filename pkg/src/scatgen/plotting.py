"""Figures written next to the CSV outputs. Uses the Agg backend only."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata so re-runs write identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def tile(images, cols: int | None = None, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile ``(n, h, w, 3)`` images row-major into one array, ``ceil(sqrt(n))`` columns by default."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), fill, dtype=np.float64)
    for k, img in enumerate(images):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        out[y : y + h, x : x + w] = np.clip(img, 0.0, 1.0)
    return out


def loss_curve(rows, path, title="training"):
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ep = [r["epoch"] for r in rows]
    ax1.plot(ep, [r["mean_l1"] for r in rows], color="C0", label="mean L1")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean L1", color="C0")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(ep, [r["train_psnr"] for r in rows], color="C1", label="train PSNR")
    ax2.set_ylabel("PSNR (dB)", color="C1")
    ax1.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def psnr_histogram(values, path, label):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if v.size:
        ax.hist(v, bins=min(30, max(5, v.size // 4)), color="C2")
        ax.axvline(np.mean(v), color="k", ls="--", lw=1, label=f"mean {np.mean(v):.2f} dB")
        ax.legend()
    ax.set_xlabel("PSNR (dB)")
    ax.set_ylabel("images")
    ax.set_title(label)
    fig.tight_layout()
    _save(fig, path)


def ratio_histogram(ratios, path, percentiles: dict):
    r = np.asarray(ratios, dtype=np.float64)
    r = r[np.isfinite(r)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(r, bins=50, color="C0")
    for p, a in percentiles.items():
        if np.isfinite(a):
            ax.axvline(a, ls=":", color="k", lw=1)
            ax.text(a, ax.get_ylim()[1] * 0.9, f"{p:g}%", rotation=90, fontsize=7)
    ax.set_xlabel(r"$\|x-x'\| / \|P\bar\Phi(x)-P\bar\Phi(x')\|$")
    ax.set_ylabel("pairs")
    fig.tight_layout()
    _save(fig, path)


def littlewood_paley_map(lp_sum, path):
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(np.fft.fftshift(lp_sum), cmap="viridis", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax)
    ax.set_title("Littlewood-Paley sum")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def side_by_side(originals, recons, path, max_items: int = 8):
    k = min(len(originals), max_items)
    fig, axes = plt.subplots(2, k, figsize=(1.4 * k, 3), squeeze=False)
    for i in range(k):
        for row, src in enumerate((originals, recons)):
            ax = axes[row, i]
            ax.imshow(np.clip(src[i], 0.0, 1.0), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("x")
    axes[1, 0].set_ylabel("G(Phi(x))")
    fig.tight_layout()
    _save(fig, path)
