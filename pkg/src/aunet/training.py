"""Triplet pretraining, AU fine-tuning, learning-rate schedule, initialisation and gradient checks."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .checkpoint import load_model_state

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


def lr_schedule(step, base_lr, warmup):
    """Linear warmup to ``base_lr`` at ``warmup``, then ``base_lr * (step / warmup) ** -0.5``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step <= warmup:
        return base_lr * step / warmup
    return base_lr * (step / warmup) ** -0.5


def init_parameters(model, encoder_checkpoint=None, seed=0):
    """Kaiming-normal conv/linear weights, zero biases, unit BN scales; optionally load the encoder.

    The mask-logit bias is the one exception: it starts at ``cfg.mask_bias_init``.

    Initialisation draws from a private generator so it is reproducible for a
    given ``seed`` irrespective of global RNG state.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
        mask_extractor = getattr(model, "mask_extractor", None)
        if mask_extractor is not None:
            mask_extractor.head.bias.fill_(model.cfg.mask_bias_init)
    if encoder_checkpoint is not None:
        # encoder-only checkpoints carry the "encoder." name prefix
        root = model if hasattr(model, "encoder") else nn.ModuleDict({"encoder": model})
        load_model_state(root, encoder_checkpoint, prefix="encoder.")
    return model


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # {"step", "lr", loss terms...}
    epochs: list = field(default_factory=list)   # {"epoch", "mean_loss", optional "val_f1"}

    def add_step(self, step, lr, **terms):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append({"step": step, "lr": lr, **terms})

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _set_lr(optimizers, lr):
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def _check_finite(value, step, what):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} loss ({value}) at step {step}")


def _batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def pretrain(encoder, triplets, image_fn, cfg, log_every=1):
    """Train ``encoder`` (a :class:`GlobalExpressionEncoder`) with the triplet loss.

    ``image_fn(ref)`` returns the (3, H, W) array for a triplet reference.
    Images of the batch's anchors, positives and negatives go through the
    encoder as one batch.
    """
    if not triplets:
        raise ValueError("pretraining needs at least one triplet")
    dtype = next(encoder.parameters()).dtype
    cache = {}

    def img(ref):
        if ref not in cache:
            cache[ref] = torch.as_tensor(np.asarray(image_fn(ref)), dtype=dtype)
        return cache[ref]

    params = [p for p in encoder.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=0.0, betas=(cfg.adam_beta1, cfg.adam_beta2), weight_decay=cfg.weight_decay)
    tlog = TrainLog()
    encoder.train()
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(triplets), cfg.batch_size, cfg.seed, epoch):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            step += 1
            lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps)
            _set_lr([opt], lr)
            apn = [triplets[i].ordered() for i in idx]
            x = torch.stack([img(r) for t in apn for r in t])
            z = encoder.embed(x).view(len(idx), 3, -1)
            loss = losses.triplet_loss(z[:, 0], z[:, 1], z[:, 2], cfg.margin)
            value = loss.item()
            _check_finite(value, step, "triplet")
            opt.zero_grad(set_to_none=False)
            loss.backward()
            opt.step()
            if step % log_every == 0:
                tlog.add_step(step, lr, triplet=value)
            total += value * len(idx)
            count += len(idx)
        tlog.epochs.append({"epoch": epoch + 1, "mean_loss": total / max(count, 1)})
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return encoder, tlog


def make_optimizers(model, cfg):
    """Main Adam (with weight decay) for everything except the mask extractor, which gets its own, undecayed Adam."""
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    main = [p for p in model.non_mask_parameters() if p.requires_grad]
    opts = [torch.optim.Adam(main, lr=0.0, betas=betas, weight_decay=cfg.weight_decay)]
    mask = [p for p in model.mask_parameters() if p.requires_grad]
    if mask:
        opts.append(torch.optim.Adam(mask, lr=0.0, betas=betas, weight_decay=0.0))
    return opts


def batch_loss(model, x, y, lam):
    """Mean AU loss + ``lam`` * mean reconstruction loss for one batch; returns (total, au, rec, out)."""
    out = model(x)
    au = losses.au_loss(y, out["probabilities"])
    if "reconstruction" in out:
        rec = losses.rec_loss(out["reconstruction"], x)
    else:
        rec = torch.zeros((), dtype=au.dtype)
    return au + lam * rec, au, rec, out


def finetune(model, dataset, cfg, val_dataset=None, log_every=1, on_epoch=None):
    """Train an :class:`AUNet` on an :class:`AUDataset` with the AU + reconstruction loss."""
    from .evaluation import evaluate  # local import: evaluation depends on this module

    if dataset.n_aus != model.cfg.n_aus:
        raise ValueError(f"dataset has {dataset.n_aus} AUs but the model expects {model.cfg.n_aus}")
    if len(dataset) == 0:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(dataset.images(), dtype=dtype)
    labels = torch.as_tensor(dataset.labels())
    opts = make_optimizers(model, cfg)
    tlog = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            step += 1
            lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps)
            _set_lr(opts, lr)
            idx = torch.as_tensor(idx)
            loss, au, rec, _ = batch_loss(model, images[idx], labels[idx], cfg.lambda_rec)
            value = loss.item()
            _check_finite(value, step, "total")
            for opt in opts:
                opt.zero_grad(set_to_none=False)
            loss.backward()
            for opt in opts:
                opt.step()
            if step % log_every == 0:
                tlog.add_step(step, lr, au=au.item(), rec=rec.item(), total=value)
            total += value * len(idx)
            count += len(idx)
        if count == 0:
            break
        entry = {"epoch": epoch + 1, "mean_loss": total / count}
        if val_dataset is not None:
            entry["val_f1"] = evaluate(model, val_dataset).avg_f1
        tlog.epochs.append(entry)
        log.info("epoch %d: %s", epoch + 1, entry)
        if on_epoch is not None:
            on_epoch(epoch + 1, model, entry)
        if cfg.max_steps and step >= cfg.max_steps:
            break
    model.eval()
    return model, tlog


# ---------------------------------------------------------------------------
# finite-difference gradient checks

def _rel_err(analytic, numeric, floor):
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
    return ((analytic - numeric).abs() / denom).max().item() if analytic.numel() else 0.0


def gradient_check(fn, params, eps=1e-4, floor=1e-6, vectorize=True, chunk=24):
    """Max relative error between autograd and central differences of ``fn(*params)``.

    ``fn`` must return a scalar tensor.  Relative error is
    ``|g_a - g_n| / max(|g_a|, |g_n|, floor)``; ``floor`` keeps exactly-zero and
    vanishing gradients from dividing by zero.  With ``vectorize`` the
    perturbed evaluations of each tensor are batched with ``torch.func.vmap``
    (``fn`` must then be free of data-dependent Python control flow).
    """
    params = [p.detach().clone().requires_grad_(True) for p in params]
    out = fn(*params)
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    worst = 0.0
    with torch.no_grad():
        base = [p.detach() for p in params]
        for i, p in enumerate(base):
            numeric = _numeric_grad(fn, base, i, eps, vectorize, chunk)
            worst = max(worst, _rel_err(grads[i], numeric, floor))
    return worst


def _numeric_grad(fn, base, i, eps, vectorize, chunk):
    p = base[i]
    n = p.numel()
    flat = p.reshape(-1)
    out = torch.empty(n, dtype=p.dtype)
    if vectorize:
        def call(q):
            args = list(base)
            args[i] = q
            return fn(*args)
        batched = torch.func.vmap(call)
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            k = stop - start
            pert = flat.unsqueeze(0).repeat(2 * k, 1)
            rows = torch.arange(k)
            pert[rows, start + rows] += eps
            pert[k + rows, start + rows] -= eps
            vals = batched(pert.view(2 * k, *p.shape))
            out[start:stop] = (vals[:k] - vals[k:]) / (2 * eps)
        return out.view_as(p)
    for j in range(n):
        orig = flat[j].item()
        flat[j] = orig + eps
        fp = fn(*base).item()
        flat[j] = orig - eps
        fm = fn(*base).item()
        flat[j] = orig
        out[j] = (fp - fm) / (2 * eps)
    return out.view_as(p)


def model_gradient_check(model, images, labels, lam=0.001, eps=1e-5, floor=1e-6, vectorize=True, chunk=24):
    """Gradient check of the total training loss w.r.t. every parameter of ``model``.

    Runs in evaluation mode (fixed normalisation statistics) so the loss is a
    deterministic function of the parameters.  Analytic gradients come from one
    backward pass through the whole model.  For classifier k's parameters the
    perturbed losses are evaluated from the cached classifier inputs, since
    nothing upstream of classifier k (and no other AU's probability) depends on
    them; the values are the same as a full forward pass at a fraction of the cost.
    """
    model.eval()
    names = [n for n, _ in model.named_parameters()]
    params = [p.detach() for p in model.parameters()]
    buffers = dict(model.named_buffers())

    def forward(ps):
        state = dict(zip(names, ps))
        state.update(buffers)
        return torch.func.functional_call(model, state, (images,))

    def rec_term(out):
        if "reconstruction" not in out:
            return 0.0
        return lam * losses.rec_loss(out["reconstruction"], images)

    def fn(*ps):
        out = forward(ps)
        return losses.au_loss(labels, out["probabilities"]) + rec_term(out)

    live = [p.clone().requires_grad_(True) for p in params]
    grads = torch.autograd.grad(fn(*live), live, allow_unused=True)
    grads = {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}

    captured = {}
    hook = model.classifiers.register_forward_pre_hook(lambda mod, args: captured.update(x=args[0]))
    with torch.no_grad():
        out = forward(params)
    hook.remove()
    comps, probs, rec = captured["x"], out["probabilities"], rec_term(out)

    def classifier_fn(k, clf_names, clf_buffers):
        clf = model.classifiers.classifiers[k]

        def f(*ps):
            state = dict(zip(clf_names, ps))
            state.update(clf_buffers)
            p_k = torch.func.functional_call(clf, state, (comps[:, k],))[2]
            return losses.au_loss(labels, torch.cat([probs[:, :k], p_k[:, None], probs[:, k + 1:]], dim=1)) + rec
        return f

    worst = 0.0
    with torch.no_grad():
        index = {n: i for i, n in enumerate(names)}
        handled = set()
        for k, clf in enumerate(model.classifiers.classifiers):
            prefix = f"classifiers.classifiers.{k}."
            clf_names = [n for n, _ in clf.named_parameters()]
            clf_params = [params[index[prefix + n]] for n in clf_names]
            f = classifier_fn(k, clf_names, dict(clf.named_buffers()))
            for j, n in enumerate(clf_names):
                numeric = _numeric_grad(f, clf_params, j, eps, vectorize, chunk)
                worst = max(worst, _rel_err(grads[prefix + n], numeric, floor))
                handled.add(prefix + n)
        for i, n in enumerate(names):
            if n not in handled:
                numeric = _numeric_grad(fn, params, i, eps, vectorize, chunk)
                worst = max(worst, _rel_err(grads[n], numeric, floor))
    return worst
