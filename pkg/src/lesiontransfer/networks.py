"""Backbone R, image classifier S1, pixel predictor S2 and the domain critic D.

All parameters live in flat ``{name: Tensor}`` dictionaries so optimisers,
checkpoints and the ablation wiring can treat them uniformly. Inputs are
NHWC batches (a single ``H x W x C`` map is also accepted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention
from . import tensor as T
from .io_formats import load_checkpoint, save_checkpoint
from .tensor import ShapeError, Tensor

BACKBONE_CHANNELS = (8, 16, 32, 32)
BACKBONE_STRIDES = (2, 2, 1, 1)
DILATIONS = (1, 2, 4)
ASPP_BRANCH = 16
CRITIC_CHANNELS = (16, 32, 64, 64, 1)
CRITIC_STRIDES = (2, 2, 2, 1, 1)
CRITIC_SLOPE = 0.2
BODY_SLOPE = 0.1
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NetConfig:
    K: int = 2
    K_img: int = 2
    in_channels: int = 3
    normalize_axis: str = "first"
    refine: bool = True
    dtype: str = "float32"

    @property
    def feat_channels(self) -> int:
        return BACKBONE_CHANNELS[-1]


def _conv_param(rng, kh, kw, cin, cout, dtype, zero=False):
    if zero:
        w = np.zeros((kh, kw, cin, cout))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / (kh * kw * cin)), (kh, kw, cin, cout))
    return Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True)


def init_segmenter(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Parameters of R, the attention block, S1 and S2."""
    dt = np.dtype(cfg.dtype)
    p: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(BACKBONE_CHANNELS[:3]):
        p[f"R.conv{i}.w"], p[f"R.conv{i}.b"] = _conv_param(rng, 3, 3, cin, cout, dt)
        cin = cout
    cout = BACKBONE_CHANNELS[3]
    for d in DILATIONS:
        p[f"R.dil{d}.w"], p[f"R.dil{d}.b"] = _conv_param(rng, 3, 3, cin, cout, dt)
    p.update(attention.init_params(cout, rng, dt, prefix="att"))
    p["S1.w"] = Tensor((rng.normal(0.0, np.sqrt(1.0 / cout), (cout, cfg.K_img))).astype(dt), requires_grad=True)
    p["S1.b"] = Tensor(np.zeros(cfg.K_img, dt), requires_grad=True)
    for d in DILATIONS:
        p[f"S2.aspp{d}.w"], p[f"S2.aspp{d}.b"] = _conv_param(rng, 3, 3, cout, ASPP_BRANCH, dt)
    p["S2.out.w"], p["S2.out.b"] = _conv_param(rng, 1, 1, ASPP_BRANCH * len(DILATIONS), cfg.K, dt)
    return p


def init_critic(in_channels: int, rng: np.random.Generator, dtype="float32") -> dict[str, Tensor]:
    """Five 3x3 convs; the last is zero-initialised so every score starts at 0.5."""
    dt = np.dtype(dtype)
    p: dict[str, Tensor] = {}
    cin = in_channels
    for i, cout in enumerate(CRITIC_CHANNELS):
        p[f"D.conv{i}.w"], p[f"D.conv{i}.b"] = _conv_param(
            rng, 3, 3, cin, cout, dt, zero=(i == len(CRITIC_CHANNELS) - 1))
        cin = cout
    return p


def _conv(x, p, name, stride=1, dilation=1):
    return T.add(T.conv2d(x, p[f"{name}.w"], stride, dilation), p[f"{name}.b"])


def backbone_forward(images: Tensor, p: dict[str, Tensor]) -> Tensor:
    """F_m at a quarter of the input extent with 32 channels."""
    h, w = images.shape[-3], images.shape[-2]
    if h % 4 or w % 4:
        raise ShapeError(f"image extents must be divisible by 4, got {h}x{w}")
    x = images
    for i, s in enumerate(BACKBONE_STRIDES[:3]):
        x = T.leaky_relu(_conv(x, p, f"R.conv{i}", stride=s), BODY_SLOPE)
    branches = [_conv(x, p, f"R.dil{d}", dilation=d) for d in DILATIONS]
    total = branches[0]
    for b in branches[1:]:
        total = T.add(total, b)
    return T.leaky_relu(total, BODY_SLOPE)


def attention_forward(fm: Tensor, p: dict[str, Tensor], normalize_axis: str = "first") -> Tensor:
    return attention.attend(fm, p, normalize_axis, prefix="att")


def classifier_logits(f: Tensor, p: dict[str, Tensor]) -> Tensor:
    pooled = T.mean(f, axis=(-3, -2))
    return T.add(T.matmul(T.reshape(pooled, (-1, pooled.shape[-1])), p["S1.w"]), p["S1.b"])


def classifier_forward(f: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Image-level class probabilities, one row per sample."""
    return T.softmax(classifier_logits(f, p), axis=-1)


def segmenter_features(f: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Concatenated ASPP branches after activation (the centroid features)."""
    branches = [_conv(f, p, f"S2.aspp{d}", dilation=d) for d in DILATIONS]
    return T.leaky_relu(T.concatenate(branches, axis=-1), BODY_SLOPE)


def segmenter_logits(feats: Tensor, p: dict[str, Tensor], image_hw: tuple[int, int]) -> Tensor:
    return T.resize(_conv(feats, p, "S2.out"), image_hw, "bilinear")


def classification_refine(class_probs: Tensor, pixel_logits: Tensor, enabled: bool = True) -> Tensor:
    """Shift each pixel's class-k logit by log p_k of the image classifier."""
    if not enabled:
        return pixel_logits
    K = pixel_logits.shape[-1]
    if class_probs.shape[-1] != K:
        raise ShapeError(f"refinement needs K == K_img, got {K} and {class_probs.shape[-1]}")
    batched = pixel_logits.ndim == 4
    n = pixel_logits.shape[0] if batched else 1
    logp = T.log(T.clamp_min(T.reshape(class_probs, (n, 1, 1, K)), PROB_FLOOR))
    if not batched:
        logp = T.reshape(logp, (1, 1, K))
    return T.add(pixel_logits, T.broadcast_to(logp, pixel_logits.shape))


def segmenter_forward(f: Tensor, p: dict[str, Tensor], image_hw: tuple[int, int],
                      class_probs: Tensor | None = None, refine: bool = False) -> Tensor:
    logits = segmenter_logits(segmenter_features(f, p), p, image_hw)
    if refine:
        logits = classification_refine(class_probs, logits, True)
    return T.softmax(logits, axis=-1)


def critic_forward(f: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Per-location domain scores in (0, 1); 1 means source."""
    h, w = f.shape[-3], f.shape[-2]
    if h < 8 or w < 8:
        raise ShapeError(f"critic needs feature extents >= 8, got {h}x{w}")
    x = f
    last = len(CRITIC_CHANNELS) - 1
    for i, s in enumerate(CRITIC_STRIDES):
        x = _conv(x, p, f"D.conv{i}", stride=s)
        x = T.sigmoid(x) if i == last else T.leaky_relu(x, CRITIC_SLOPE)
    return x


def to_numpy(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def save_params(path, params: dict[str, Tensor]) -> None:
    save_checkpoint(path, to_numpy(params))


def load_params(path, dtype="float32") -> dict[str, Tensor]:
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in load_checkpoint(path).items()}
