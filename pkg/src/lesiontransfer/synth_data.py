"""Procedural two-domain lesion segmentation data.

The source domain has pixel masks and image tags; the target domain is drawn
from a shifted regime (a hue turn, lower contrast with a brightness lift, a
different background texture family, stretched lesions) and only its image
tags are used for training. Class 0 is "normal"; the default config has a
single lesion class, the ``shapes`` config three shape classes.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from .io_formats import ensure_dir, read_pgm, write_pgm
from .tensor import load_tensor, save_tensor

DOMAINS = ("source", "target")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DomainStyle:
    background: tuple[float, float, float]
    lesion: tuple[float, float, float]
    texture: str          # "smooth" or "stripes"
    texture_amp: float
    texture_freq: float
    hue_shift: float      # radians, rotation in the YIQ chroma plane
    contrast: float
    brightness: float
    stretch: float        # lesion aspect-ratio multiplier
    noise: float


SOURCE_STYLE = DomainStyle((0.80, 0.52, 0.48), (0.55, 0.18, 0.20), "smooth", 0.10, 4.0,
                           0.0, 1.0, 0.0, 1.0, 0.03)
# a mild hue turn plus a brightness lift: strong enough that source-only
# training misses most target lesions, mild enough for alignment to recover
TARGET_STYLE = DomainStyle((0.80, 0.52, 0.48), (0.55, 0.18, 0.20), "stripes", 0.14, 9.0,
                           0.05, 0.65, 0.20, 1.6, 0.05)


@dataclass(frozen=True)
class SynthConfig:
    K: int = 2
    size: int = 64
    n_source_train: int = 300
    n_target_train: int = 150
    n_source_test: int = 100
    n_target_test: int = 100
    lesion_prob: float = 0.5
    blobs_min: int = 1
    blobs_max: int = 3
    radius_min: float = 5.0
    radius_max: float = 11.0
    source: DomainStyle = SOURCE_STYLE
    target: DomainStyle = TARGET_STYLE
    shape_colors: tuple = ((0.55, 0.18, 0.20), (0.25, 0.30, 0.62), (0.30, 0.55, 0.25))

    def counts(self) -> dict[tuple[str, str], int]:
        return {("source", "train"): self.n_source_train, ("target", "train"): self.n_target_train,
                ("source", "test"): self.n_source_test, ("target", "test"): self.n_target_test}

    def canonical(self) -> str:
        lines = []

        def walk(prefix, obj):
            for f in fields(obj):
                val = getattr(obj, f.name)
                if hasattr(val, "__dataclass_fields__"):
                    walk(f"{prefix}{f.name}.", val)
                else:
                    lines.append(f"{prefix}{f.name} = {val!r}")
        walk("", self)
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def default_config() -> SynthConfig:
    return SynthConfig()


def shapes_config() -> SynthConfig:
    return SynthConfig(K=4, lesion_prob=0.8, blobs_min=2, blobs_max=3)


@dataclass
class DomainDataset:
    domain: str
    split: str
    images: np.ndarray            # (n, H, W, 3) float32 in [0, 1]
    image_labels: np.ndarray      # (n,) 0 normal / 1 lesion
    seg: np.ndarray | None        # (n, H, W) class ids
    seeds: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])


# ---------------------------------------------------------------------------
# sample synthesis
# ---------------------------------------------------------------------------

def _texture(rng, size, style: DomainStyle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if style.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.sin(2 * np.pi * style.texture_freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    elif style.texture == "smooth":
        t = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / style.texture_freq / 2, mode="wrap")
        t = t / (np.abs(t).max() + 1e-12)
    else:
        raise ValueError(f"unknown texture family {style.texture!r}")
    return t


def _blob(rng, size, cfg: SynthConfig, style: DomainStyle, shape_kind: int = 0) -> np.ndarray:
    r = rng.uniform(cfg.radius_min, cfg.radius_max)
    margin = r * max(style.stretch, 1.0) + 2
    cy, cx = rng.uniform(min(margin, size / 2), max(size - margin, size / 2), size=2)
    ang = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = np.cos(ang) * dx + np.sin(ang) * dy
    w = -np.sin(ang) * dx + np.cos(ang) * dy
    a, b = r * style.stretch, r / np.sqrt(style.stretch)
    if shape_kind == 2:       # rectangle
        d = np.maximum(np.abs(u) / a, np.abs(w) / b)
    elif shape_kind == 3:     # triangle-ish wedge
        d = np.maximum(np.abs(w) / b + u / (2 * a), -u / a)
    else:                     # deformed ellipse
        d = np.sqrt((u / a) ** 2 + (w / b) ** 2)
        wobble = ndimage.gaussian_filter(rng.normal(size=(size, size)), 3.0, mode="wrap")
        d = d + 0.6 * wobble / (np.abs(wobble).max() + 1e-12) * 0.5
    return d < 1.0


def _hue_rotate(img: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0:
        return img
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


def make_sample(cfg: SynthConfig, style: DomainStyle, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.size
    seg = np.zeros((size, size), dtype=np.int64)
    if rng.random() < cfg.lesion_prob:
        for _ in range(int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))):
            cls = 1 if cfg.K == 2 else int(rng.integers(1, cfg.K))
            seg[_blob(rng, size, cfg, style, shape_kind=0 if cfg.K == 2 else cls)] = cls
    bg = np.asarray(style.background)[None, None, :] * (1.0 + style.texture_amp * _texture(rng, size, style))[..., None]
    img = bg.copy()
    colors = [None, np.asarray(style.lesion)] if cfg.K == 2 else [None] + [np.asarray(c) for c in cfg.shape_colors]
    spots = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.5)
    spots = spots / (np.abs(spots).max() + 1e-12)
    for k in range(1, cfg.K):
        m = ndimage.gaussian_filter((seg == k).astype(np.float64), 1.0)[..., None]
        lesion = colors[k][None, None, :] * (1.0 + 0.15 * spots[..., None])
        img = img * (1 - m) + lesion * m
    img = _hue_rotate(img, style.hue_shift)
    mean = img.mean(axis=(0, 1), keepdims=True)
    img = (img - mean) * style.contrast + mean + style.brightness
    img = img + style.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), seg


def _sample_rng(seed: int, domain: str, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), DOMAINS.index(domain),
                                                         SPLITS.index(split), int(index)]))


def generate_split(cfg: SynthConfig, seed: int, domain: str, split: str) -> DomainDataset:
    n = cfg.counts()[(domain, split)]
    style = cfg.source if domain == "source" else cfg.target
    imgs = np.zeros((n, cfg.size, cfg.size, 3), dtype=np.float32)
    segs = np.zeros((n, cfg.size, cfg.size), dtype=np.int64)
    for i in range(n):
        imgs[i], segs[i] = make_sample(cfg, style, _sample_rng(seed, domain, split, i))
    labels = (segs.reshape(n, -1) > 0).any(axis=1).astype(np.int64)
    return DomainDataset(domain, split, imgs, labels, segs, [(seed, domain, split, i) for i in range(n)])


def generate(cfg: SynthConfig | None = None, seed: int = 0) -> dict[tuple[str, str], DomainDataset]:
    """All four (domain, split) collections, keyed by ``(domain, split)``."""
    cfg = cfg or default_config()
    return {key: generate_split(cfg, seed, *key) for key in cfg.counts()}


def hidden_target_masks(data: dict, split: str = "train") -> np.ndarray:
    return data[("target", split)].seg


def histogram_distance(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Per-channel total-variation distance of pixel-intensity histograms, averaged."""
    out = []
    for c in range(a.shape[-1]):
        ha, _ = np.histogram(a[..., c], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(b[..., c], bins=bins, range=(0.0, 1.0))
        out.append(0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum())
    return float(np.mean(out))


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

def write_dataset(root, data: dict, cfg: SynthConfig, seed: int) -> None:
    lines = [f"seed = {seed}", f"config_digest = {cfg.digest()}", f"K = {cfg.K}", f"size = {cfg.size}"]
    for (domain, split), ds in sorted(data.items()):
        d = ensure_dir(os.path.join(root, domain, split))
        # target training masks stay hidden
        with_seg = not (domain == "target" and split == "train")
        for i in range(len(ds)):
            stem = os.path.join(d, f"{i:05d}")
            save_tensor(f"{stem}.img.ten", ds.images[i])
            if with_seg:
                write_pgm(f"{stem}.seg.pgm", ds.seg[i], 255)
            with open(f"{stem}.label.txt", "w") as fh:
                fh.write(f"{int(ds.image_labels[i])}\n")
        lines.append(f"count.{domain}.{split} = {len(ds)}")
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(root, "synth-config.txt"), "w") as fh:
        fh.write(cfg.canonical())


def read_manifest(root) -> dict[str, str]:
    out = {}
    with open(os.path.join(root, "manifest.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def read_split(root, domain: str, split: str) -> DomainDataset:
    d = os.path.join(root, domain, split)
    stems = sorted(f[:-len(".img.ten")] for f in os.listdir(d) if f.endswith(".img.ten"))
    imgs, labels, segs = [], [], []
    for s in stems:
        stem = os.path.join(d, s)
        imgs.append(load_tensor(f"{stem}.img.ten"))
        with open(f"{stem}.label.txt") as fh:
            labels.append(int(fh.read().strip()))
        if os.path.exists(f"{stem}.seg.pgm"):
            segs.append(read_pgm(f"{stem}.seg.pgm"))
    seg = np.stack(segs) if segs and len(segs) == len(stems) else None
    return DomainDataset(domain, split, np.stack(imgs).astype(np.float32),
                         np.asarray(labels, dtype=np.int64), seg)


def read_dataset(root) -> dict[tuple[str, str], DomainDataset]:
    return {(dm, sp): read_split(root, dm, sp) for dm in DOMAINS for sp in SPLITS
            if os.path.isdir(os.path.join(root, dm, sp))}


def with_counts(cfg: SynthConfig, **counts) -> SynthConfig:
    return replace(cfg, **counts)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
