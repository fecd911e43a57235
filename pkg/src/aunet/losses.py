"""Triplet, multi-label BCE and reconstruction losses.

Each function accepts a single sample (1-D / 3-D tensors) or a batch with a
leading batch dimension; batches are reduced per sample and then averaged.
"""
from dataclasses import dataclass

import torch

PROB_CLAMP = 1e-7


def _sqdist(a, b):
    return ((a - b) ** 2).sum(dim=-1)


def triplet_loss(anchor, positive, negative, margin=0.2):
    """Two-sided hinge on squared L2 distances.

    ``max(0, d(A,P) - d(A,N) + m) + max(0, d(A,P) - d(P,N) + m)``; the loss is
    symmetric in anchor and positive.
    """
    if not (anchor.shape == positive.shape == negative.shape):
        raise ValueError(
            f"embedding shapes differ: {tuple(anchor.shape)}, {tuple(positive.shape)}, {tuple(negative.shape)}")
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    d_ap = _sqdist(anchor, positive)
    loss = torch.clamp(d_ap - _sqdist(anchor, negative) + margin, min=0) + \
        torch.clamp(d_ap - _sqdist(positive, negative) + margin, min=0)
    return loss.mean() if loss.dim() else loss


def au_loss(labels, probs):
    """Summed binary cross-entropy over the N AUs; ``labels`` first, predictions second."""
    labels = torch.as_tensor(labels, dtype=probs.dtype, device=probs.device)
    if labels.shape != probs.shape:
        raise ValueError(f"label shape {tuple(labels.shape)} != prediction shape {tuple(probs.shape)}")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).sum(dim=-1)
    return loss.mean() if loss.dim() else loss


def rec_loss(y_rec, y_truth):
    """Half the summed squared pixel error (no averaging over pixels)."""
    if y_rec.shape != y_truth.shape:
        raise ValueError(f"shape mismatch {tuple(y_rec.shape)} vs {tuple(y_truth.shape)}")
    diff = (y_rec - y_truth) ** 2
    if diff.dim() <= 3:
        return 0.5 * diff.sum()
    return (0.5 * diff.flatten(1).sum(dim=1)).mean()


@dataclass
class LossReport:
    au_loss: float
    rec_loss: float
    total: float
    lam: float


def total_loss(au, rec, lam):
    """``au + lam * rec``.  Works on floats (returns :class:`LossReport`) or tensors (returns a tensor).

    Float inputs are checked for sign; tensors are not, since a data-dependent
    check would break ``vmap`` tracing in the gradient checker.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if isinstance(au, torch.Tensor) or isinstance(rec, torch.Tensor):
        return au + lam * rec
    if au < 0 or rec < 0:
        raise ValueError(f"loss terms must be nonnegative, got au={au}, rec={rec}")
    return LossReport(au_loss=au, rec_loss=rec, total=au + lam * rec, lam=lam)
