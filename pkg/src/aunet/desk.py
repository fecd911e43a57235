"""Desk-scale synthetic experiments: one-core runs of the full pipeline and its ablations.

The task: 64x64 images, 4 AUs and 9 synthetic identities.  Training uses 2000
frames from 6 identities and testing uses 1000 frames from the other 3.
Encoder pretraining draws triplets from a separately seeded population of
identities, standing in for an unrelated face corpus.
"""
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint, save_model
from .config import desk_model_config, desk_train_config
from .data import AUDataset, SynthConfig, make_folds, synth_dataset, synth_sample, synth_triplets
from .evaluation import config_fingerprint, evaluate, mean_localization
from .model import AUNet, GlobalExpressionEncoder
from .training import finetune, init_parameters, pretrain

N_TRAIN = 2000
N_TEST = 1000
PRETRAIN_SEED_OFFSET = 1000


def desk_synth_config(seed=0):
    return SynthConfig(n_aus=4, image_size=64, n_identities=9, seed=seed)


def desk_split(seed=0, n_train=N_TRAIN, n_test=N_TEST):
    """Identity-exclusive (train, test) datasets: 6 identities for training, 3 held out."""
    cfg = desk_synth_config(seed)
    train_ids, test_ids = make_folds([f"id{i:02d}" for i in range(cfg.n_identities)], 3, seed)[0]
    per_id = math.ceil(max(n_train / len(train_ids), n_test / len(test_ids)))
    ds = synth_dataset(cfg, per_id * cfg.n_identities)
    train, test = ds.subset(train_ids), ds.subset(test_ids)
    return (AUDataset(train.samples[:n_train], train.au_names, train.region_maps),
            AUDataset(test.samples[:n_test], test.au_names, test.region_maps))


def pretrain_desk_encoder(seed=0, n_triplets=2000, steps=400, model_cfg=None, path=None):
    """Triplet-pretrain a desk encoder on identities disjoint from the AU data.

    Returns ``(encoder, train_log)``; with ``path`` the encoder is also saved
    as an ``encoder.``-prefixed checkpoint.
    """
    model_cfg = model_cfg or desk_model_config()
    scfg = dataclasses.replace(desk_synth_config(seed + PRETRAIN_SEED_OFFSET), n_identities=30)
    pool = 3 * n_triplets
    triplets = synth_triplets(scfg, n_triplets, seed=seed, pool_size=pool)
    train_cfg = desk_train_config(seed=seed, epochs=math.ceil(steps * 10 / n_triplets), max_steps=steps)
    encoder = init_parameters(GlobalExpressionEncoder(model_cfg), seed=seed)
    encoder, tlog = pretrain(encoder, triplets, lambda i: synth_sample(scfg, i).image, train_cfg)
    if path is not None:
        state = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
        save_checkpoint(path, state, meta={"kind": "encoder"})
    return encoder, tlog


@dataclass
class DeskResult:
    variant: str
    seed: int
    per_au_f1: list
    avg_f1: float
    localization: Optional[list] = None
    steps: int = 0
    extra: dict = field(default_factory=dict)


def run_desk(variant="full", seed=0, encoder_checkpoint=None, max_steps=0, out=None, split=None,
             model_overrides=None, train_overrides=None, on_epoch=None):
    """Train one variant on the desk split and evaluate it on the held-out identities.

    With ``out`` the directory receives ``metrics.json``, ``model.ckpt`` and
    ``train_log.json``.
    """
    model_cfg = desk_model_config(variant=variant, **(model_overrides or {}))
    train_cfg = desk_train_config(seed=seed, max_steps=max_steps, **(train_overrides or {}))
    train, test = split if split is not None else desk_split(seed)
    model = init_parameters(AUNet(model_cfg), encoder_checkpoint, seed=seed)
    model, tlog = finetune(model, train, train_cfg, on_epoch=on_epoch)
    report = evaluate(model, test, seed=seed, config_fingerprint=config_fingerprint(model_cfg, train_cfg))
    report.in_domain = True
    loc = mean_localization(model, test) if model.has_masks else None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        report.write(os.path.join(out, "metrics.json"))
        save_model(os.path.join(out, "model.ckpt"), model)
        tlog.save(os.path.join(out, "train_log.json"))
    return DeskResult(variant, seed, report.per_au_f1, report.avg_f1, loc, tlog.steps[-1]["step"],
                      {"model": model, "report": report})


def localized_count(localization, threshold=1.5):
    return int(np.sum(np.asarray(localization) >= threshold))
