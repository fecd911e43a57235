"""
Ablations at desk scale
=======================

Removes parts of the model one at a time, with the same step budget each:

* ``no_mask``: feature maps go to the classifiers ungated,
* ``no_lam``: the classifiers read the encoder output directly,
* random init: the full model without triplet pretraining.

Each seed costs roughly 20 minutes on one core; pass fewer steps for a quick
look (``python ablation_study.py 200``).
"""

import sys

import torch

from aunet.desk import desk_split, pretrain_desk_encoder, run_desk

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
seeds = (0, 1, 2)

table = {}
for seed in seeds:
    split = desk_split(seed)
    enc = f"encoder_seed{seed}.ckpt"
    pretrain_desk_encoder(seed, path=enc)
    row = {v: run_desk(v, seed, encoder_checkpoint=enc, max_steps=steps, split=split).avg_f1
           for v in ("full", "no_mask", "no_lam")}
    row["random init"] = run_desk("full", seed, max_steps=steps, split=split).avg_f1
    table[seed] = row
    print(seed, {k: round(v, 3) for k, v in row.items()}, flush=True)

names = list(table[seeds[0]])
print("\nseed  " + "  ".join(f"{n:>11}" for n in names))
for seed, row in table.items():
    print(f"{seed:>4}  " + "  ".join(f"{row[n]:11.3f}" for n in names))
print("mean  " + "  ".join(f"{sum(r[n] for r in table.values()) / len(table):11.3f}" for n in names))
