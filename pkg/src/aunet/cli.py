"""``aunet`` command line: synth-gen, pretrain, train, eval, predict, visualize.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from .checkpoint import CheckpointError, load_model_state, save_checkpoint, save_model
from .config import ConfigError, ModelConfig, TrainConfig, get_dtype, load_config
from .data import DataError, SynthConfig, load_au_dataset, load_triplets, read_image, write_synth
from .evaluation import config_fingerprint, cross_dataset_eval, cross_validate, evaluate, predict, write_report_csv
from .model import AUNet, GlobalExpressionEncoder
from .training import NumericalError, finetune, init_parameters, pretrain
from .viz import OverlaySpec, plot_training_curves, project_embeddings, render_mask_overlay

log = logging.getLogger("aunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _configs(args):
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if getattr(args, "variant", None):
        model_cfg = dataclasses.replace(model_cfg, variant=args.variant)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg


def _out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _build(model_cfg, train_cfg, checkpoint=None, encoder=None):
    model = AUNet(model_cfg)
    init_parameters(model, encoder, seed=train_cfg.seed)
    model.to(get_dtype())
    if checkpoint:
        load_model_state(model, checkpoint)
    return model


def _check_aus(model_cfg, dataset):
    if dataset.n_aus != model_cfg.n_aus:
        raise DataError(f"dataset has {dataset.n_aus} AUs ({','.join(dataset.au_names)}) "
                        f"but the config sets n_aus = {model_cfg.n_aus}")


def cmd_synth_gen(args):
    cfg = SynthConfig(n_aus=args.n_aus, image_size=args.image_size, n_identities=args.n_identities,
                      noise_std=args.noise_std, seed=args.seed or 0)
    write_synth(_out(args), cfg, args.n_samples, n_triplets=args.n_triplets, triplet_seed=args.seed or 0)
    print(f"wrote {args.n_samples} frames and {args.n_triplets} triplets to {args.out}")


def cmd_pretrain(args):
    model_cfg, train_cfg = _configs(args)
    if not os.path.exists(args.triplets):
        raise DataError(f"triplets file not found: {args.triplets}")
    root = os.path.dirname(os.path.abspath(args.triplets))
    triplets = load_triplets(root)
    encoder = GlobalExpressionEncoder(model_cfg)
    init_parameters(encoder, seed=train_cfg.seed)
    encoder.to(get_dtype())
    encoder, tlog = pretrain(encoder, triplets, lambda ref: read_image(os.path.join(root, "images", ref)), train_cfg)
    out = _out(args)
    state = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    save_checkpoint(os.path.join(out, args.checkpoint_name), state, meta={"kind": "encoder"})
    tlog.save(os.path.join(out, "pretrain_log.json"))
    print(f"encoder checkpoint: {os.path.join(out, args.checkpoint_name)}")


def cmd_train(args):
    model_cfg, train_cfg = _configs(args)
    dataset = load_au_dataset(args.data, intensity_mode=args.intensity)
    _check_aus(model_cfg, dataset)
    out = _out(args)
    if args.folds:
        def save_fold(i, model, rep, train_subj, test_subj):
            d = os.path.join(out, f"fold{i}")
            os.makedirs(d, exist_ok=True)
            save_model(os.path.join(d, "model.ckpt"), model)
            rep.write(os.path.join(d, "metrics.json"))

        avg, folds = cross_validate(dataset, model_cfg, train_cfg, k=args.folds, encoder_checkpoint=args.encoder,
                                    on_fold=save_fold)
        avg.write(os.path.join(out, "metrics.json"))
        write_report_csv(os.path.join(out, "report.csv"), [(model_cfg.variant, avg)])
        print(f"{args.folds}-fold average F1: {avg.avg_f1:.4f}")
        return
    model = _build(model_cfg, train_cfg, encoder=args.encoder)
    model, tlog = finetune(model, dataset, train_cfg)
    save_model(os.path.join(out, "model.ckpt"), model,
               meta={"config_fingerprint": config_fingerprint(model_cfg, train_cfg)})
    tlog.save(os.path.join(out, "train_log.json"))
    with open(os.path.join(out, "config_fingerprint.txt"), "w") as fh:
        fh.write(config_fingerprint(model_cfg, train_cfg) + "\n")
    print(f"model checkpoint: {os.path.join(out, 'model.ckpt')}")


def cmd_eval(args):
    model_cfg, train_cfg = _configs(args)
    model = _build(model_cfg, train_cfg, checkpoint=args.checkpoint)
    dataset = load_au_dataset(args.data, intensity_mode=args.intensity)
    fp = config_fingerprint(model_cfg, train_cfg)
    au_names = args.au_names.split(",") if args.au_names else None
    if args.cross_dataset:
        names = au_names or dataset.au_names[: model_cfg.n_aus]
        rep = cross_dataset_eval(model, dataset, names, in_domain=False, seed=train_cfg.seed, config_fingerprint=fp)
    else:
        _check_aus(model_cfg, dataset)
        if au_names:
            rep = cross_dataset_eval(model, dataset, au_names, in_domain=True, seed=train_cfg.seed,
                                     config_fingerprint=fp)
        else:
            rep = evaluate(model, dataset, seed=train_cfg.seed, config_fingerprint=fp)
            rep.in_domain = True
    out = _out(args)
    rep.write(os.path.join(out, "metrics.json"))
    write_report_csv(os.path.join(out, "report.csv"), [(args.method or model_cfg.variant, rep)])
    print(f"average F1: {rep.avg_f1:.4f}")


def _predict_inputs(args):
    if args.images:
        rows = []
        for p in args.images:
            if not os.path.exists(p):
                raise DataError(f"image not found: {p}")
            rows.append((os.path.basename(os.path.dirname(p)), os.path.splitext(os.path.basename(p))[0], read_image(p)))
        return rows
    dataset = load_au_dataset(args.data, intensity_mode=args.intensity)
    return [(s.subject, s.frame, dataset.image(i)) for i, s in enumerate(dataset.samples)]


def cmd_predict(args):
    model_cfg, train_cfg = _configs(args)
    model = _build(model_cfg, train_cfg, checkpoint=args.checkpoint)
    rows = _predict_inputs(args)
    probs = predict(model, np.stack([r[2] for r in rows]))["probabilities"]
    names = args.au_names.split(",") if args.au_names else [f"AU{k + 1}" for k in range(model_cfg.n_aus)]
    path = os.path.join(_out(args), "predictions.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "frame", *names])
        for (subj, frame, _), p in zip(rows, probs):
            w.writerow([subj, frame, *[f"{v:.6f}" for v in p]])
    print(f"predictions: {path}")


def cmd_visualize(args):
    model_cfg, train_cfg = _configs(args)
    model = _build(model_cfg, train_cfg, checkpoint=args.checkpoint)
    dataset = load_au_dataset(args.data, intensity_mode=args.intensity)
    _check_aus(model_cfg, dataset)
    out = _out(args)
    n = min(args.n_samples, len(dataset))
    idx = np.random.default_rng(train_cfg.seed).permutation(len(dataset))[:n]
    images = dataset.images(idx)
    res = predict(model, images, keep=("probabilities", "embeddings", "masks"))
    if "masks" in res:
        for j in range(min(args.n_overlays, n)):
            s = dataset.samples[idx[j]]
            for k in range(model_cfg.n_aus):
                spec = OverlaySpec(au_index=k, alpha=args.alpha, image_ref=f"{s.subject}/{s.frame}")
                render_mask_overlay(images[j], res["masks"][j, k], spec,
                                    os.path.join(out, f"overlay_{s.subject}_{s.frame}_{dataset.au_names[k]}.png"))
    k = args.au
    labels = dataset.labels()[idx, k]
    project_embeddings(res["embeddings"][:, k], labels, os.path.join(out, "embeddings_2d.csv"))
    if args.log:
        from .training import TrainLog
        with open(args.log) as fh:
            doc = json.load(fh)
        plot_training_curves(TrainLog(**doc), os.path.join(out, "training_curves.png"))
    print(f"figures written to {out}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset root (labels.csv + images/)")
    data.add_argument("--intensity", action="store_true", help="labels are 0..5 intensities; binarise them")

    p = _Parser(prog="aunet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n-samples", type=int, default=3000)
    s.add_argument("--n-triplets", type=int, default=0)
    s.add_argument("--n-aus", type=int, default=4)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--n-identities", type=int, default=9)
    s.add_argument("--noise-std", type=float, default=0.03)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("pretrain", parents=[common], help="triplet-pretrain the encoder")
    s.add_argument("--triplets", required=True, help="path to triplets.csv (images/ next to it)")
    s.add_argument("--checkpoint-name", default="encoder.ckpt")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common, data], help="fine-tune for AU detection")
    s.add_argument("--variant", choices=["full", "no_mask", "no_lam", "cnn_replace"])
    s.add_argument("--folds", type=int, default=0, help="subject-exclusive k-fold cross-validation")
    s.add_argument("--encoder", help="pretrained encoder checkpoint (loaded by 'encoder.' name prefix)")
    s.add_argument("--parallel", action="store_true", help="accepted for compatibility; folds run serially")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, data], help="compute per-AU F1")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cross-dataset", action="store_true")
    s.add_argument("--au-names", help="comma-separated AU names of the model, in output order")
    s.add_argument("--method", help="row label in report.csv")
    s.add_argument("--variant", choices=["full", "no_mask", "no_lam", "cnn_replace"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common, data], help="per-frame probabilities")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--images", nargs="*")
    s.add_argument("--au-names")
    s.add_argument("--variant", choices=["full", "no_mask", "no_lam", "cnn_replace"])
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("visualize", parents=[common, data], help="mask overlays and embedding projection")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n-samples", type=int, default=1000)
    s.add_argument("--n-overlays", type=int, default=4)
    s.add_argument("--au", type=int, default=0, help="AU index whose embeddings are projected")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--log", help="train_log.json to plot")
    s.add_argument("--variant", choices=["full", "no_mask", "no_lam", "cnn_replace"])
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train", "eval", "visualize") and not args.data:
            raise UsageError("--data is required")
        if args.command == "predict" and not (args.data or args.images):
            raise UsageError("predict needs --data or --images")
        args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"aunet: error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"aunet: data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"aunet: numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
