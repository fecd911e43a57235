"""Frame-level F1 per AU, cross-validation / cross-dataset harnesses and mask localisation scores."""
import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .data import make_folds

LOCALIZATION_CAP = 1e6


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_frames(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if len(self.tp) else 0


def confusion_counts(probs, labels, threshold=0.5, n_aus=None):
    """Per-AU TP/FP/FN/TN; a frame is predicted positive when ``prob >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.size == 0 and labels.size == 0:
        n = n_aus or 0
        z = np.zeros(n, dtype=np.int64)
        return ConfusionCounts(z, z.copy(), z.copy(), z.copy())
    if probs.ndim != 2 or probs.shape != labels.shape:
        raise ValueError(f"probabilities {probs.shape} and labels {labels.shape} must both be (frames, N)")
    if n_aus is not None and probs.shape[1] != n_aus:
        raise ValueError(f"expected {n_aus} AUs, got {probs.shape[1]}")
    pred = probs >= threshold
    truth = labels.astype(bool)
    return ConfusionCounts(
        tp=(pred & truth).sum(0), fp=(pred & ~truth).sum(0),
        fn=(~pred & truth).sum(0), tn=(~pred & ~truth).sum(0))


def f1_per_au(c):
    """F1 = 2PR / (P + R) per AU; any zero denominator gives 0."""
    out = []
    for tp, fp, fn in zip(c.tp, c.fp, c.fn):
        tp, fp, fn = float(tp), float(fp), float(fn)
        if tp + fp == 0 or tp + fn == 0:
            out.append(0.0)
            continue
        p, r = tp / (tp + fp), tp / (tp + fn)
        out.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return out


def config_fingerprint(model_cfg, train_cfg=None):
    """``<variant>:<hash>`` over the canonical JSON of the configs."""
    doc = {"model": dataclasses.asdict(model_cfg)}
    if train_cfg is not None:
        doc["train"] = dataclasses.asdict(train_cfg)
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    return f"{model_cfg.variant}:{digest}"


@dataclass
class EvalReport:
    au_names: List[str]
    per_au_f1: List[float]
    avg_f1: float = field(init=False)
    fold_id: Optional[int] = None
    seed: Optional[int] = None
    config_fingerprint: str = ""
    in_domain: Optional[bool] = None

    def __post_init__(self):
        self.per_au_f1 = [float(v) for v in self.per_au_f1]
        self.avg_f1 = float(np.mean(self.per_au_f1)) if self.per_au_f1 else 0.0

    def to_dict(self):
        d = {"au_names": list(self.au_names), "per_au_f1": self.per_au_f1, "avg_f1": self.avg_f1,
             "fold_id": self.fold_id, "seed": self.seed, "config_fingerprint": self.config_fingerprint}
        if self.in_domain is not None:
            d["in_domain"] = self.in_domain
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def average_reports(reports, **kw):
    """Mean of per-AU F1 over folds (not pooled counts)."""
    names = reports[0].au_names
    per_au = np.mean([r.per_au_f1 for r in reports], axis=0)
    return EvalReport(list(names), per_au.tolist(), **kw)


def write_report_csv(path, rows):
    """Table with one row per method and one column per AU plus ``Avg.``; values are F1 in percent."""
    names = rows[0][1].au_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *names, "Avg."])
        for method, rep in rows:
            w.writerow([method, *[f"{100 * v:.1f}" for v in rep.per_au_f1], f"{100 * rep.avg_f1:.1f}"])


@torch.no_grad()
def predict(model, images, batch_size=50, keep=("probabilities",)):
    """Evaluation-mode forward over ``images`` (array or tensor, (M, 3, H, W)); returns numpy arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=dtype)
    out = {k: [] for k in keep}
    for i in range(0, len(images), batch_size):
        res = model(images[i: i + batch_size])
        for k in keep:
            if k in res:
                out[k].append(res[k].cpu().numpy())
    return {k: np.concatenate(v) for k, v in out.items() if v}


def evaluate(model, dataset, threshold=0.5, batch_size=50, **report_kw):
    probs = predict(model, dataset.images(), batch_size)["probabilities"]
    counts = confusion_counts(probs, dataset.labels(), threshold, n_aus=dataset.n_aus)
    return EvalReport(list(dataset.au_names), f1_per_au(counts), **report_kw)


def cross_validate(dataset, model_cfg, train_cfg, k=3, seed=None, encoder_checkpoint=None, on_fold=None):
    """Subject-exclusive k-fold training and testing; returns ``(averaged report, per-fold reports)``.

    Fold ``i`` initialises and shuffles with seed ``train_cfg.seed + i``.
    """
    from .model import AUNet
    from .training import finetune, init_parameters

    seed = train_cfg.seed if seed is None else seed
    fp = config_fingerprint(model_cfg, train_cfg)
    reports = []
    for i, (train_subj, test_subj) in enumerate(make_folds(dataset.subjects(), k, seed)):
        fold_cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + i)
        model = AUNet(model_cfg)
        init_parameters(model, encoder_checkpoint, seed=fold_cfg.seed)
        finetune(model, dataset.subset(train_subj), fold_cfg)
        rep = evaluate(model, dataset.subset(test_subj), fold_id=i, seed=fold_cfg.seed, config_fingerprint=fp)
        reports.append(rep)
        if on_fold is not None:
            on_fold(i, model, rep, train_subj, test_subj)
    return average_reports(reports, seed=seed, config_fingerprint=fp), reports


def cross_dataset_eval(model, dataset, au_names, in_domain=False, threshold=0.5, **report_kw):
    """Evaluate a trained model on another dataset whose AU names cover ``au_names``.

    Dataset label columns are reordered to the model's AU order by exact name match.
    """
    missing = [n for n in au_names if n not in dataset.au_names]
    if missing:
        raise ValueError(f"dataset lacks AUs required by the model: {missing}")
    cols = [dataset.au_names.index(n) for n in au_names]
    probs = predict(model, dataset.images())["probabilities"]
    labels = dataset.labels()[:, cols]
    counts = confusion_counts(probs, labels, threshold, n_aus=len(au_names))
    return EvalReport(list(au_names), f1_per_au(counts), in_domain=in_domain, **report_kw)


def mask_localization_score(masks, region_maps):
    """Per AU: mean mask inside its region / (mean mask outside + 1e-9), capped at 1e6.

    ``masks`` is (N or N+1, H, W) (a leading singleton channel is allowed);
    ``region_maps`` holds N binary (H, W) maps.  Extra background masks are ignored.
    """
    masks = np.asarray(masks, dtype=np.float64)
    regions = np.asarray(region_maps).astype(bool)
    if masks.ndim == 4:
        masks = masks[:, 0]
    if regions.ndim == 4:
        regions = regions[:, 0]
    n = regions.shape[0]
    if masks.shape[0] < n or masks.shape[1:] != regions.shape[1:]:
        raise ValueError(f"masks {masks.shape} do not match region maps {regions.shape}")
    scores = []
    for k in range(n):
        inside = regions[k]
        if not inside.any():
            raise ValueError(f"region map {k} is empty")
        outside = masks[k][~inside]
        out_mean = outside.mean() if outside.size else 0.0
        scores.append(min(LOCALIZATION_CAP, float(masks[k][inside].mean() / (out_mean + 1e-9))))
    return scores


def mean_localization(model, dataset, batch_size=50):
    """Average :func:`mask_localization_score` over all frames of a synthetic dataset."""
    if dataset.region_maps is None:
        raise ValueError("dataset has no ground-truth region maps")
    masks = predict(model, dataset.images(), batch_size, keep=("masks",))["masks"]
    per_frame = [mask_localization_score(m, dataset.region_maps) for m in masks]
    return np.mean(per_frame, axis=0).tolist()
