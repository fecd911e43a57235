"""AU datasets: folder loading, intensity binarisation, subject-exclusive folds, synthetic faces.

On-disk layout::

    root/images/<subject>/<frame>.png     8-bit RGB
    root/labels.csv                       subject,frame,<AU name>...
    root/triplets.csv                     img_a,img_b,img_c,odd   (paths relative to root/images)
"""
import csv
import functools
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np
from PIL import Image

from .config import ConfigError


class DataError(ValueError):
    """Malformed or missing dataset content."""


def binarize_intensity(v):
    """FACS intensity 0..5 to occurrence: {0, 1} are absent, 2..5 present."""
    if isinstance(v, bool) or int(v) != v or not 0 <= v <= 5:
        raise DataError(f"intensity must be an integer in 0..5, got {v!r}")
    return 0 if v <= 1 else 1


@dataclass
class AUSample:
    subject: str
    frame: str
    image: Union[str, np.ndarray]  # path, or a (3, H, W) float32 array in [0, 1]
    labels: np.ndarray


@dataclass
class AUDataset:
    samples: List[AUSample]
    au_names: List[str]
    region_maps: Optional[np.ndarray] = None  # (N, H, W) ground-truth regions, synthetic data only

    def __post_init__(self):
        n = len(self.au_names)
        for s in self.samples:
            if len(s.labels) != n:
                raise DataError(f"sample {s.subject}/{s.frame} has {len(s.labels)} labels, expected {n}")
            if not s.subject:
                raise DataError(f"sample with frame {s.frame!r} has an empty subject id")

    def __len__(self):
        return len(self.samples)

    @property
    def n_aus(self):
        return len(self.au_names)

    def subjects(self):
        return sorted({s.subject for s in self.samples})

    def subset(self, subjects):
        keep = set(subjects)
        return AUDataset([s for s in self.samples if s.subject in keep], list(self.au_names), self.region_maps)

    def image(self, i):
        img = self.samples[i].image
        if isinstance(img, np.ndarray):
            return img
        return read_image(img)

    def labels(self):
        return np.stack([s.labels for s in self.samples]).astype(np.int64) if self.samples \
            else np.zeros((0, self.n_aus), dtype=np.int64)

    def images(self, indices=None):
        idx = range(len(self)) if indices is None else indices
        return np.stack([self.image(i) for i in idx]).astype(np.float32)


def read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, arr):
    """Write a (3, H, W) array in [0, 1] as 8-bit RGB PNG."""
    data = np.clip(np.rint(np.asarray(arr).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_au_dataset(root, intensity_mode=False):
    """Read ``root/labels.csv`` and index images under ``root/images``.

    With ``intensity_mode`` the label columns hold 0..5 intensities and are
    binarised; otherwise they must already be 0/1.  Images are loaded lazily.
    """
    path = os.path.join(root, "labels.csv")
    if not os.path.exists(path):
        raise DataError(f"labels file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"no samples in {path}")
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[:2] != ["subject", "frame"] or len(header) < 3:
        raise DataError(f"{path}: header must be 'subject,frame,<AU name>...', got {','.join(header)}")
    au_names = header[2:]
    if not body:
        raise DataError(f"no samples in {path}")
    samples = []
    for lineno, row in enumerate(body, 2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(au_names)} label columns, got {len(row) - 2}")
        subject, frame = row[0], row[1]
        try:
            values = [int(v) for v in row[2:]]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: non-integer label in {row[2:]}") from e
        if intensity_mode:
            labels = [binarize_intensity(v) for v in values]
        else:
            if any(v not in (0, 1) for v in values):
                raise DataError(f"{path}:{lineno}: binary labels must be 0/1, got {values}")
            labels = values
        img = os.path.join(root, "images", subject, f"{frame}.png")
        if not os.path.exists(img):
            raise DataError(f"missing image file: {img}")
        samples.append(AUSample(subject, frame, img, np.asarray(labels, dtype=np.int64)))
    return AUDataset(samples, au_names)


def write_au_dataset(root, dataset, intensities=None):
    """Write images and ``labels.csv``; pass integer ``intensities`` (M, N) to write intensity labels."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    with open(os.path.join(root, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "frame", *dataset.au_names])
        for i, s in enumerate(dataset.samples):
            d = os.path.join(root, "images", s.subject)
            os.makedirs(d, exist_ok=True)
            write_image(os.path.join(d, f"{s.frame}.png"), dataset.image(i))
            values = s.labels if intensities is None else intensities[i]
            w.writerow([s.subject, s.frame, *[int(v) for v in values]])


@dataclass(frozen=True)
class TripletRecord:
    """Three image references; ``odd`` indexes the one with the most different expression."""
    a: Union[str, int]
    b: Union[str, int]
    c: Union[str, int]
    odd: int

    def __post_init__(self):
        if self.odd not in (0, 1, 2):
            raise DataError(f"odd must be 0, 1 or 2, got {self.odd!r}")
        if len({self.a, self.b, self.c}) != 3:
            raise DataError(f"triplet references must be distinct: {self.a!r}, {self.b!r}, {self.c!r}")

    @property
    def refs(self):
        return (self.a, self.b, self.c)

    def ordered(self):
        """Return ``(anchor, positive, negative)`` references."""
        rest = [r for i, r in enumerate(self.refs) if i != self.odd]
        return rest[0], rest[1], self.refs[self.odd]


def load_triplets(root):
    path = os.path.join(root, "triplets.csv")
    if not os.path.exists(path):
        raise DataError(f"triplets file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["img_a", "img_b", "img_c", "odd"]:
            raise DataError(f"{path}: header must be img_a,img_b,img_c,odd")
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                rec = TripletRecord(row["img_a"], row["img_b"], row["img_c"], int(row["odd"]))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            for ref in rec.refs:
                if not os.path.exists(os.path.join(root, "images", ref)):
                    raise DataError(f"missing image file: {os.path.join(root, 'images', ref)}")
            out.append(rec)
    if not out:
        raise DataError(f"no triplets in {path}")
    return out


def write_triplets(root, triplets):
    with open(os.path.join(root, "triplets.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["img_a", "img_b", "img_c", "odd"])
        for t in triplets:
            w.writerow([t.a, t.b, t.c, t.odd])


def make_folds(subjects, k, seed=0):
    """Seeded near-equal, subject-exclusive split into ``k`` (train, test) pairs."""
    subjects = sorted(set(subjects))
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(subjects):
        raise ConfigError(f"cannot make {k} folds from {len(subjects)} subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    folds = []
    for part in np.array_split(np.arange(len(shuffled)), k):
        test = [shuffled[i] for i in part]
        test_set = set(test)
        folds.append(([s for s in shuffled if s not in test_set], test))
    return folds


# ---------------------------------------------------------------------------
# synthetic faces with known AU regions

@dataclass(frozen=True)
class SynthConfig:
    n_aus: int = 4
    image_size: int = 64
    n_identities: int = 9
    noise_std: float = 0.03
    seed: int = 0
    distractors: bool = True

    def __post_init__(self):
        if self.n_aus < 1 or self.n_identities < 1:
            raise ConfigError("n_aus and n_identities must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        g = self.grid
        if self.image_size < 2 * g or self.image_size // g < 4:
            raise ConfigError(f"image_size {self.image_size} too small for {self.n_aus} AU regions")

    @property
    def grid(self):
        return math.ceil(math.sqrt(self.n_aus))


@dataclass
class SynthSample:
    image: np.ndarray         # (3, H, W) float32 in [0, 1]
    labels: np.ndarray        # (N,) int64
    intensities: np.ndarray   # (N,) float64 in [0, 1]
    region_maps: np.ndarray   # (N, 1, H, W) uint8
    identity: int = 0
    index: int = 0


def au_regions(cfg):
    """Axis-aligned (top, left, bottom, right) rectangle per AU: the central half of a grid cell."""
    g, s = cfg.grid, cfg.image_size
    cell = s // g
    side = cell // 2
    rects = []
    for k in range(cfg.n_aus):
        r, c = divmod(k, g)
        top = r * cell + (cell - side) // 2
        left = c * cell + (cell - side) // 2
        rects.append((top, left, top + side, left + side))
    return rects


def region_maps(cfg):
    s = cfg.image_size
    maps = np.zeros((cfg.n_aus, 1, s, s), dtype=np.uint8)
    for k, (t, l, b, r) in enumerate(au_regions(cfg)):
        maps[k, 0, t:b, l:r] = 1
    return maps


def _stream(cfg, kind, index):
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(kind, index)))


def _stripes(cfg, k):
    s = cfg.image_size
    side = (s // cfg.grid) // 2
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    angle = np.pi * k / max(cfg.n_aus, 1)
    period = max(2.0, side / 2)
    stripes = 0.5 + 0.5 * np.cos(2 * np.pi * (np.cos(angle) * yy + np.sin(angle) * xx) / period)
    color = np.array([0.45, 0.25 + 0.2 * ((k + 1) % 2), 0.15 + 0.3 * (k % 3 == 0)])
    return (0.4 + 0.6 * stripes)[None] * color[:, None, None]


def distractor_bands(cfg):
    """Strips of each grid cell lying outside its AU rectangle (above, below, left, right)."""
    g, s = cfg.grid, cfg.image_size
    cell = s // g
    side = cell // 2
    pad = (cell - side) // 2
    bands = []
    for r in range(g):
        for c in range(g):
            top, left = r * cell, c * cell
            bands += [
                (top, left + pad, top + pad, left + pad + side),
                (top + pad + side, left + pad, top + cell, left + pad + side),
                (top + pad, left, top + pad + side, left + pad),
                (top + pad, left + pad + side, top + pad + side, left + cell),
            ]
    return bands


@functools.lru_cache(maxsize=256)
def identity_pattern(cfg, identity):
    """Per-identity base image: a smooth shaded field plus, with ``distractors``,
    fixed AU-like textures painted outside the AU regions (they never change with expression).
    """
    rng = _stream(cfg, 0, identity)
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    img = np.empty((3, s, s))
    tint = rng.uniform(0.7, 1.0, size=3)
    field_ = np.zeros((s, s))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12)
    for ch in range(3):
        img[ch] = 0.15 + 0.4 * tint[ch] * field_
    if cfg.distractors:
        bands = distractor_bands(cfg)
        picks = rng.permutation(len(bands))
        for k in range(cfg.n_aus):
            t, l, b, r = bands[picks[k % len(bands)]]
            img[:, t:b, l:r] += rng.uniform(0.5, 1.0) * _stripes(cfg, k)[:, t:b, l:r]
    img.setflags(write=False)
    return img


@functools.lru_cache(maxsize=64)
def au_templates(cfg):
    """(N, 3, H, W) additive appearance change of each AU at intensity 1, zero outside its region."""
    s = cfg.image_size
    out = np.zeros((cfg.n_aus, 3, s, s))
    for k, (t, l, b, r) in enumerate(au_regions(cfg)):
        out[k, :, t:b, l:r] = _stripes(cfg, k)[:, t:b, l:r]
    out.setflags(write=False)
    return out


def render_synth(cfg, identity, intensities, rng=None):
    """Base pattern + sum of intensity-weighted AU templates + Gaussian noise, clipped to [0, 1]."""
    img = identity_pattern(cfg, identity) + np.tensordot(np.asarray(intensities, float), au_templates(cfg), axes=1)
    if cfg.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_intensities(rng, n_aus):
    # bimodal with a gap around the 0.5 threshold so each region is linearly separable
    active = rng.random(n_aus) < 0.5
    low = rng.uniform(0.0, 0.35, size=n_aus)
    high = rng.uniform(0.65, 1.0, size=n_aus)
    return np.where(active, high, low)


def synth_sample(cfg, index):
    """Sample ``index`` of the synthetic stream; a pure function of ``(cfg, index)``."""
    rng = _stream(cfg, 1, index)
    identity = index % cfg.n_identities
    inten = synth_intensities(rng, cfg.n_aus)
    image = render_synth(cfg, identity, inten, rng)
    labels = (inten >= 0.5).astype(np.int64)
    return SynthSample(image, labels, inten, region_maps(cfg), identity, index)


def synth_generate(cfg, n_samples, start=0):
    return [synth_sample(cfg, i) for i in range(start, start + n_samples)]


def synth_au_names(n_aus):
    return [f"AU{k + 1}" for k in range(n_aus)]


def synth_dataset(cfg, n_samples, start=0):
    """Wrap synthetic samples as an in-memory :class:`AUDataset` (subject = identity)."""
    samples = [
        AUSample(f"id{s.identity:02d}", f"{s.index:06d}", s.image, s.labels)
        for s in synth_generate(cfg, n_samples, start)
    ]
    return AUDataset(samples, synth_au_names(cfg.n_aus), region_maps(cfg)[:, 0])


def _odd_one_out(vectors):
    """Index of the vector not in the closest pair, or None on a distance tie (within 1e-9)."""
    pairs = [(0, 1), (0, 2), (1, 2)]
    d = [float(np.linalg.norm(vectors[i] - vectors[j])) for i, j in pairs]
    order = sorted(range(3), key=d.__getitem__)
    if d[order[1]] - d[order[0]] <= 1e-9:
        return None
    i, j = pairs[order[0]]
    return 3 - i - j


def synth_triplets(cfg, n_triplets, seed=0, pool_size=1000, max_attempts=100):
    """Triplets over synthetic sample indices ``0..pool_size-1``, labelled by intensity distance."""
    if pool_size < 3:
        raise ConfigError("pool_size must be >= 3")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_triplets):
        for _attempt in range(max_attempts):
            idx = [int(i) for i in rng.choice(pool_size, size=3, replace=False)]
            inten = [synth_sample_intensities(cfg, i) for i in idx]
            odd = _odd_one_out(inten)
            if odd is not None:
                out.append(TripletRecord(idx[0], idx[1], idx[2], odd))
                break
        else:
            raise DataError(f"could not draw a tie-free triplet in {max_attempts} attempts")
    return out


def synth_sample_intensities(cfg, index):
    return synth_intensities(_stream(cfg, 1, index), cfg.n_aus)


def synth_frame_path(cfg, index):
    return f"id{index % cfg.n_identities:02d}/{index:06d}.png"


def write_synth(root, cfg, n_samples, n_triplets=0, triplet_seed=0):
    """Materialise a synthetic dataset in the on-disk layout (triplets reference the same frames)."""
    ds = synth_dataset(cfg, n_samples)
    write_au_dataset(root, ds)
    if n_triplets:
        trips = synth_triplets(cfg, n_triplets, seed=triplet_seed, pool_size=n_samples)
        write_triplets(root, [
            TripletRecord(synth_frame_path(cfg, t.a), synth_frame_path(cfg, t.b), synth_frame_path(cfg, t.c), t.odd)
            for t in trips])
    return ds
