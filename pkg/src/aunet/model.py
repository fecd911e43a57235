"""Network components: global expression encoder, local AU features module, classifier bank.

Tensors are batched (B, C, H, W).  Every learnable component uses ELU so the
whole network is continuously differentiable, which keeps finite-difference
gradient checks clean.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig

CLASSIFIER_WIDTHS = (16, 32, 64, 128, 256)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.elu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.elu(out + x)


class PlainBlock(nn.Module):
    """Same layers as :class:`ResidualBlock` without the skip connection."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.elu(self.bn1(self.conv1(x)))
        return F.elu(self.bn2(self.conv2(out)))


def conv_bn_elu(cin, cout, kernel=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ELU(),
    )


def _stage_widths(top, n_stages):
    # widest stage is the deepest one; halve going outward, never below 8
    return [max(8, top >> (n_stages - 1 - i)) for i in range(n_stages)]


def _check_image(x, cfg):
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ConfigError(
            f"expected images of shape (B, 3, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}")


def _check_global(h, cfg):
    s = cfg.encoder_size
    if h.dim() != 4 or tuple(h.shape[1:]) != (cfg.encoder_channels, s, s):
        raise ConfigError(
            f"expected global features of shape (B, {cfg.encoder_channels}, {s}, {s}), got {tuple(h.shape)}")


class GlobalExpressionEncoder(nn.Module):
    """Stride-2 residual stages down to the ``image_size / downsample_factor`` grid.

    ``forward`` returns the global feature map; ``embed`` runs the pretraining
    head (GAP, linear, L2 normalisation) on top of it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = _stage_widths(cfg.encoder_channels, cfg.n_stages)
        widths[-1] = cfg.encoder_channels
        stages, cin = [], 3
        for w in widths:
            stages.append(nn.Sequential(conv_bn_elu(cin, w, 3, stride=2), ResidualBlock(w)))
            cin = w
        self.stages = nn.Sequential(*stages)
        self.embed_head = nn.Linear(cfg.encoder_channels, cfg.embed_dim)

    def forward(self, x):
        _check_image(x, self.cfg)
        return self.stages(x)

    def embed(self, x):
        h = self.forward(x)
        z = self.embed_head(h.mean(dim=(2, 3)))
        return F.normalize(z, dim=1, eps=1e-12)


def _upsampling_trunk(cfg, block):
    widths = _stage_widths(cfg.encoder_channels, cfg.n_stages)[::-1]
    layers, cin = [], cfg.encoder_channels
    for i, w in enumerate(widths):
        nxt = widths[i + 1] if i + 1 < len(widths) else max(8, w // 2)
        if cin != w:
            layers.append(conv_bn_elu(cin, w, 1))
        layers += [block(w), nn.Upsample(scale_factor=2, mode="nearest"), conv_bn_elu(w, nxt, 3)]
        cin = nxt
    return nn.Sequential(*layers), cin


class FeatureMapExtractor(nn.Module):
    """Shared upsampling trunk with N+1 independent 3-channel heads (the last is background)."""

    def __init__(self, cfg: ModelConfig, plain=False):
        super().__init__()
        self.cfg = cfg
        self.plain = plain
        self.trunk, width = _upsampling_trunk(cfg, PlainBlock if plain else ResidualBlock)
        if plain:
            # one undifferentiated projection instead of per-AU heads
            self.out = nn.Conv2d(width, 3 * (cfg.n_aus + 1), 3, padding=1)
        else:
            self.heads = nn.ModuleList(nn.Conv2d(width, 3, 3, padding=1) for _ in range(cfg.n_aus + 1))

    def forward(self, h):
        _check_global(h, self.cfg)
        t = self.trunk(h)
        if self.plain:
            out = torch.sigmoid(self.out(t))
            return out.view(out.shape[0], self.cfg.n_aus + 1, 3, *out.shape[2:])
        return torch.stack([torch.sigmoid(head(t)) for head in self.heads], dim=1)


def apply_mask_activation(logits, activation):
    """Map (B, N+1, H, W) mask logits to masks; softmax runs across the N+1 channels."""
    if activation == "sigmoid":
        return torch.sigmoid(logits)
    if activation == "softmax":
        return torch.softmax(logits, dim=1)
    if activation == "tanh":
        return torch.tanh(logits)
    if activation == "none":
        return logits
    raise ConfigError(f"unknown mask activation {activation!r}")


class MaskExtractor(nn.Module):
    """Mirror of the feature trunk with one single-channel head per AU plus background."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk, width = _upsampling_trunk(cfg, ResidualBlock)
        self.head = nn.Conv2d(width, cfg.n_aus + 1, 3, padding=1)

    def logits(self, h):
        _check_global(h, self.cfg)
        return self.head(self.trunk(h))

    def forward(self, h, activation=None):
        return apply_mask_activation(self.logits(h), activation or self.cfg.mask_activation)


def mask_apply(features, masks):
    """Gate each AU feature map by its mask.

    ``features`` is (B, N+1, 3, H, W) and ``masks`` is (B, N+1, H, W) or
    (B, N+1, 1, H, W); the mask is broadcast over the 3 feature channels.
    """
    if masks.dim() == features.dim() - 1:
        masks = masks.unsqueeze(2)
    if masks.shape[:2] != features.shape[:2] or masks.shape[-2:] != features.shape[-2:] or masks.shape[2] != 1:
        raise ValueError(f"mask set {tuple(masks.shape)} does not match feature set {tuple(features.shape)}")
    return masks * features


class ReconstructionHead(nn.Module):
    """Channel-concatenates all N+1 components and decodes back to an RGB image."""

    def __init__(self, cfg: ModelConfig, hidden=16):
        super().__init__()
        self.n_components = cfg.n_aus + 1
        self.net = nn.Sequential(
            nn.Conv2d(3 * self.n_components, hidden, 3, padding=1),
            nn.ELU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def forward(self, components):
        if components.dim() != 5 or components.shape[1] != self.n_components or components.shape[2] != 3:
            raise ValueError(
                f"reconstruction needs all {self.n_components} components (AUs + background), "
                f"got {tuple(components.shape)}")
        b, k, c, hgt, wid = components.shape
        return torch.sigmoid(self.net(components.reshape(b, k * c, hgt, wid)))


def classifier_depth(spatial):
    """Number of stride-2 blocks for a square input of side ``spatial``: log2(spatial / 8), at least 1."""
    if spatial < 1:
        raise ConfigError(f"classifier input of side {spatial} is too small for a stride-2 block")
    depth = max(1, int(math.floor(math.log2(spatial / 8))))
    if depth > len(CLASSIFIER_WIDTHS):
        raise ConfigError(f"classifier input of side {spatial} needs {depth} blocks; at most 5 are defined")
    return depth


class AUClassifier(nn.Module):
    """Conv(7, stride 2, pad 3) -> BN -> ELU blocks, global average pooling, 1x1 conv to a logit.

    At 256 px input this is the five-block {16, 32, 64, 128, 256} stack; smaller
    inputs drop blocks from the front so the AU embedding stays 256-wide.
    """

    def __init__(self, in_channels, spatial):
        super().__init__()
        depth = classifier_depth(spatial)
        widths = CLASSIFIER_WIDTHS[-depth:]
        blocks, cin = [], in_channels
        for w in widths:
            blocks += [nn.Conv2d(cin, w, 7, stride=2, padding=3), nn.BatchNorm2d(w), nn.ELU()]
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.embed_dim = widths[-1]
        # 1x1 conv on the pooled 1x1 map is a linear layer on the embedding
        self.final = nn.Conv2d(self.embed_dim, 1, 1)

    def forward(self, x):
        """Return ``(embedding, logit, probability)`` with shapes (B, 256), (B,), (B,)."""
        y = self.blocks(x)
        emb = y.mean(dim=(2, 3))
        logit = self.final(emb[:, :, None, None]).flatten()
        return emb, logit, torch.sigmoid(logit)


class ClassifierBank(nn.Module):
    """One independent classifier per AU; component k goes to classifier k."""

    def __init__(self, n_aus, in_channels, spatial):
        super().__init__()
        self.classifiers = nn.ModuleList(AUClassifier(in_channels, spatial) for _ in range(n_aus))

    def forward(self, components):
        # components: (B, N, C, H, W), one slice per classifier
        outs = [clf(components[:, k]) for k, clf in enumerate(self.classifiers)]
        emb = torch.stack([o[0] for o in outs], dim=1)
        logits = torch.stack([o[1] for o in outs], dim=1)
        return emb, logits, torch.sigmoid(logits)


class AUNet(nn.Module):
    """Encoder -> (feature maps, masks) -> masked components -> {classifier bank, reconstruction}.

    ``forward`` returns a dict with ``logits``, ``probabilities`` (B, N),
    ``embeddings`` (B, N, 256) and, depending on the variant, ``masks``
    (B, N+1, H, W), ``features``, ``components`` and ``reconstruction`` (B, 3, H, W).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = GlobalExpressionEncoder(cfg)
        if cfg.variant == "no_lam":
            self.classifiers = ClassifierBank(cfg.n_aus, cfg.encoder_channels, cfg.encoder_size)
            return
        self.feature_extractor = FeatureMapExtractor(cfg, plain=cfg.variant == "cnn_replace")
        if cfg.variant != "no_mask":
            self.mask_extractor = MaskExtractor(cfg)
        self.reconstructor = ReconstructionHead(cfg)
        self.classifiers = ClassifierBank(cfg.n_aus, 3, cfg.image_size)

    @property
    def has_masks(self):
        return hasattr(self, "mask_extractor")

    def forward(self, x):
        cfg = self.cfg
        h = self.encoder(x)
        out = {}
        if cfg.variant == "no_lam":
            comps = h.unsqueeze(1).expand(-1, cfg.n_aus, -1, -1, -1)
            emb, logits, probs = self.classifiers(comps)
        else:
            feats = self.feature_extractor(h)
            out["features"] = feats
            if self.has_masks:
                masks = self.mask_extractor(h)
                comps = mask_apply(feats, masks)
                out["masks"] = masks
            else:
                comps = feats
            out["components"] = comps
            out["reconstruction"] = self.reconstructor(comps)
            # background component is reconstructed, never classified
            emb, logits, probs = self.classifiers(comps[:, : cfg.n_aus])
        out.update(embeddings=emb, logits=logits, probabilities=probs)
        return out

    def mask_parameters(self):
        return list(self.mask_extractor.parameters()) if self.has_masks else []

    def non_mask_parameters(self):
        ids = {id(p) for p in self.mask_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]
