"""Mask overlays, 2-D embedding projections and training curves."""
import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

BLUE = np.array([0.0, 0.0, 255.0])
RED = np.array([255.0, 0.0, 0.0])


@dataclass
class OverlaySpec:
    au_index: int = 0
    alpha: float = 0.5
    image_ref: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def blue_red(values):
    """Linear blue (0) to red (1) colormap; returns (..., 3) float RGB in 0..255."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    return (1.0 - v) * BLUE + v * RED


def normalize_mask(mask):
    """Per-image min-max scaling to [0, 1]; a constant mask maps to 0.5 with a warning."""
    m = np.asarray(mask, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12:
        warnings.warn("constant mask; overlay uses the mid colour", stacklevel=2)
        return np.full_like(m, 0.5)
    return (m - lo) / (hi - lo)


def render_mask_overlay(image, mask, spec=None, path=None):
    """Blend a colour-mapped mask over the grayscale image.

    ``image`` is (3, H, W) in [0, 1]; ``mask`` is (H, W) or (1, H, W).
    Returns the (H, W, 3) uint8 result and writes it as PNG when ``path`` is given.
    """
    spec = spec or OverlaySpec()
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[0]
    if image.shape[1:] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[1:]}")
    gray = 255.0 * (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])
    gray = np.repeat(gray[..., None], 3, axis=-1)
    color = blue_red(normalize_mask(mask))
    out = (1.0 - spec.alpha) * gray + spec.alpha * color
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(out, mode="RGB").save(path)
    return out


def project_embeddings(embeddings, labels=None, path=None):
    """Centered PCA to two components with a fixed sign convention.

    Each principal axis is flipped so its first nonzero loading is positive.
    If the centred data has rank < 2 the second coordinate is zero (with a
    warning).  Writes ``x,y,label`` rows to ``path`` when given.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"need at least 3 embeddings as an (M, D) array, got {x.shape}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    axes = np.zeros((2, x.shape[1]))
    rank = int((s > tol).sum()) if s.size and s[0] > 0 else 0
    for i in range(min(2, rank)):
        v = vt[i]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        axes[i] = v
    if rank < 2:
        warnings.warn(f"embeddings have rank {rank} after centering; missing components are zero", stacklevel=2)
    coords = xc @ axes.T
    if path is not None:
        labels = [""] * len(coords) if labels is None else list(labels)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "label"])
            for (cx, cy), lab in zip(coords, labels):
                w.writerow([repr(float(cx)), repr(float(cy)), lab])
    return coords


def plot_training_curves(train_log, path):
    """Loss per step (and validation F1 per epoch if present) as a PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s["step"] for s in train_log.steps]
    key = "total" if train_log.steps and "total" in train_log.steps[0] else "triplet"
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    ax[0].plot(steps, [s.get(key, np.nan) for s in train_log.steps], lw=0.8)
    ax[0].set_xlabel("step")
    ax[0].set_ylabel(f"{key} loss")
    epochs = [e["epoch"] for e in train_log.epochs]
    if any("val_f1" in e for e in train_log.epochs):
        ax[1].plot(epochs, [e.get("val_f1", np.nan) for e in train_log.epochs], marker="o")
        ax[1].set_ylabel("validation F1")
    else:
        ax[1].plot(epochs, [e["mean_loss"] for e in train_log.epochs], marker="o")
        ax[1].set_ylabel("epoch mean loss")
    ax[1].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
