"""Adversarial, feature-matching, perceptual reconstruction and stroke losses.

Conventions shared by every function here:

* images are (B, C, H, W) tensors in [0, 1];
* an "L2 gap" is the un-squared Euclidean norm of an activation difference,
  taken per sample and divided by the square root of that layer's per-sample
  element count, i.e. the RMS activation gap.  This keeps each layer's term
  independent of its spatial size; dividing the un-squared norm by the
  element count itself would let the 1-channel score grid dominate;
* every returned loss is averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import NegativeWeight, PsiNotFrozen, ShapeMismatch
from .networks import is_frozen

LOG_EPS = 1e-8
DEFAULT_PSI_LAYERS = ("dense", "out")


@dataclass(frozen=True)
class LossWeights:
    lambda_fm: float = 100.0
    lambda_rec: float = 10.0
    lambda_str: float = 0.002

    def __post_init__(self):
        for name in ("lambda_fm", "lambda_rec", "lambda_str"):
            if getattr(self, name) < 0:
                raise NegativeWeight(f"{name} = {getattr(self, name)} is negative")


@dataclass(frozen=True)
class LossBreakdown:
    adv_d: float
    adv_g: float
    fm: float
    rec: float
    stroke: float
    weights: LossWeights = field(default_factory=LossWeights)
    total_g: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_g",
                           total_g_loss(self.adv_g, self.fm, self.rec, self.stroke, self.weights))

    def row(self) -> dict:
        return {"adv_d": self.adv_d, "adv_g": self.adv_g, "fm": self.fm, "rec": self.rec,
                "stroke": self.stroke, "total_g": self.total_g}


def _clamped_log(x):
    return torch.log(torch.clamp(x, min=LOG_EPS))


def _check_pair(a, b, what="images"):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def l2_gap(a, b):
    """Per-sample ||a - b||_2 / sqrt(numel), shape (B,)."""
    diff = (a - b).flatten(1)
    return torch.linalg.vector_norm(diff, dim=1) / math.sqrt(diff.shape[1])


def scale_scores(outputs):
    """Per-scale (B,) discriminator scalars: the mean of each patch grid."""
    return [score.flatten(1).mean(dim=1) for score, _ in outputs]


def adv_d_from_scores(real_scores, fake_scores):
    total = 0.0
    for r, f in zip(real_scores, fake_scores, strict=True):
        total = total + _clamped_log(r) + _clamped_log(1.0 - f)
    return -total.mean()


def adv_g_from_scores(fake_scores):
    total = 0.0
    for f in fake_scores:
        total = total + _clamped_log(f)
    return -total.mean()


def adv_loss_d(D, z, y_real, y_fake):
    """-sum_k [log D_k(z, y) + log(1 - D_k(z, G(z)))]; ``y_fake`` is detached here."""
    _check_pair(y_real, y_fake)
    real = scale_scores(D(z, y_real))
    fake = scale_scores(D(z, y_fake.detach()))
    return adv_d_from_scores(real, fake)


def adv_loss_g(D, z, y_fake):
    """Non-saturating generator term -sum_k log D_k(z, G(z))."""
    return adv_g_from_scores(scale_scores(D(z, y_fake)))


def fm_from_outputs(real_outputs, fake_outputs):
    total = 0.0
    for (_, real_feats), (_, fake_feats) in zip(real_outputs, fake_outputs, strict=True):
        for r, f in zip(real_feats, fake_feats, strict=True):
            total = total + l2_gap(r.detach(), f)
    return total.mean()


def fm_loss(D, z, y_real, y_fake, fake_outputs=None):
    """Feature matching over every layer of every scale, on conditioned pairs."""
    _check_pair(y_real, y_fake)
    with torch.no_grad():
        real_outputs = D(z, y_real)
    if fake_outputs is None:
        fake_outputs = D(z, y_fake)
    return fm_from_outputs(real_outputs, fake_outputs)


def rec_loss(phi, y_real, y_fake, layers=None):
    _check_pair(y_real, y_fake)
    real = phi(y_real)
    fake = phi(y_fake)
    idx = range(len(real)) if layers is None else layers
    total = 0.0
    for j in idx:
        total = total + l2_gap(real[j], fake[j])
    return total.mean()


def tile_patches(x, patch_size):
    """(B, C, H, W) -> (B, N, C, p, p) on a non-overlapping grid; ragged edges dropped."""
    b, c, h, w = x.shape
    if h < patch_size or w < patch_size:
        raise ShapeMismatch(f"{h}x{w} image smaller than stroke patch {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = x[:, :, :rows * patch_size, :cols * patch_size]
    x = x.reshape(b, c, rows, patch_size, cols, patch_size).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, rows * cols, c, patch_size, patch_size)


def stroke_loss(psi, y_real, y_fake, layers=DEFAULT_PSI_LAYERS, order=None):
    """Per-patch stroke-feature gaps through the frozen classifier, summed over tiles.

    ``order`` optionally permutes the patch evaluation order; the value does
    not depend on it.
    """
    if not is_frozen(psi):
        raise PsiNotFrozen("stroke classifier must be frozen before computing the stroke loss")
    _check_pair(y_real, y_fake)
    p = psi.spec.patch_size
    real = tile_patches(y_real, p)
    fake = tile_patches(y_fake, p)
    b, n = real.shape[:2]
    if order is not None:
        real, fake = real[:, order], fake[:, order]
    with torch.no_grad():
        real_feats = psi.features(real.reshape(b * n, *real.shape[2:]))
    fake_feats = psi.features(fake.reshape(b * n, *fake.shape[2:]))
    total = 0.0
    for name in layers:
        gaps = l2_gap(real_feats[name], fake_feats[name]).reshape(b, n)
        total = total + gaps.sum(dim=1)
    return total.mean()


def total_g_loss(adv_g, fm, rec, stroke, w: LossWeights = LossWeights()):
    if min(w.lambda_fm, w.lambda_rec, w.lambda_str) < 0:
        raise NegativeWeight(f"negative loss weight in {w}")
    return adv_g + w.lambda_fm * fm + w.lambda_rec * rec + w.lambda_str * stroke


def is_finite(v) -> bool:
    return math.isfinite(float(v))
