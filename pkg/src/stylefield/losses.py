"""Content, style, consistency and total losses plus the shared extractor.

The feature extractor is a frozen, seeded random conv stack used as a
dependency-free perceptual proxy; external conv weights can be supplied for
users who have them.  All losses accept numpy arrays or torch tensors and
return a torch scalar (differentiable when the inputs carry gradients).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .flowwarp import warp

_SIGMA_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_s: float
    w_c: float

    def __post_init__(self):
        for name, v in (("w_s", self.w_s), ("w_c", self.w_c)):
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")


def _to_tensor(image, dtype=None):
    if isinstance(image, torch.Tensor):
        t = image
    else:
        t = torch.from_numpy(np.asarray(image, dtype=np.float64))
    if dtype is not None:
        t = t.to(dtype)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValidationError("expected an HxWx3 image")
    return t


class FeatureExtractor:
    """Frozen conv stack with one tap per block (stride-2 conv + ReLU).

    Weights are drawn once from a seeded generator, so the extractor is a
    pure deterministic function of its seed.  ``taps`` returns the feature
    maps of every block as CxHxW tensors, 1-indexed by convention elsewhere.
    """

    def __init__(self, seed: int = 0, channels=(16, 32, 64, 64), weights=None):
        self.channels = tuple(channels)
        if weights is not None:
            self.weights = [torch.as_tensor(w, dtype=torch.float64) for w in weights]
            if len(self.weights) != len(self.channels):
                raise ValidationError("need one conv kernel per block")
        else:
            gen = torch.Generator().manual_seed(seed)
            self.weights = []
            c_in = 3
            for c_out in self.channels:
                std = (2.0 / (c_in * 9)) ** 0.5
                w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
                self.weights.append(w * std)
                c_in = c_out

    def taps(self, image):
        """Feature maps Phi_1..Phi_J for an HxWx3 image."""
        t = _to_tensor(image)
        x = t.permute(2, 0, 1).unsqueeze(0)
        out = []
        for w in self.weights:
            x = F.relu(F.conv2d(x, w.to(x.dtype), stride=2, padding=1))
            out.append(x[0])
        return out

    @property
    def num_taps(self):
        return len(self.channels)


class IdentityExtractor:
    """Raw-pixel tap, used by tests to pin hand-computable loss values."""

    num_taps = 1

    def taps(self, image):
        t = _to_tensor(image)
        return [t.permute(2, 0, 1)]


def content_loss(image, stylized, phi, layers=(2, 3)):
    """Feature distance between an image and its stylized counterpart.

    Per layer: mean squared difference over all feature elements; the layer
    terms are summed.  ``layers`` are 1-based tap indices into ``phi``.
    """
    a = _to_tensor(image)
    b = _to_tensor(stylized)
    if a.shape != b.shape:
        raise ValidationError("content loss needs images of equal shape")
    taps_a = phi.taps(a)
    taps_b = phi.taps(b)
    total = None
    for j in layers:
        if not 1 <= j <= len(taps_a):
            raise ValidationError(f"layer index {j} out of range")
        ta = taps_a[j - 1]
        term = ((ta - taps_b[j - 1].to(ta.dtype)) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValidationError("content loss needs at least one layer")
    return total


def _channel_stats(tap):
    if tap.shape[1] * tap.shape[2] < 2:
        raise ValidationError("feature map too small for std computation")
    flat = tap.reshape(tap.shape[0], -1)
    mu = flat.mean(dim=1)
    sigma = torch.sqrt(flat.var(dim=1, unbiased=False) + _SIGMA_EPS)
    return mu, sigma


def style_loss(style_image, stylized, phi):
    """First-tap channel-statistics distance (means and stds).

    Images may differ in size; the statistics are spatial reductions.
    """
    s = _to_tensor(style_image)
    b = _to_tensor(stylized)
    mu_s, sig_s = _channel_stats(phi.taps(s)[0])
    mu_b, sig_b = _channel_stats(phi.taps(b)[0].to(mu_s.dtype))
    return ((mu_s - mu_b) ** 2).mean() + ((sig_s - sig_b) ** 2).mean()


def consistency_loss(image_i, image_j, flow, mask):
    """Masked MSE between view i and view j warped into view i's frame.

    Normalized by the count of unmasked pixels (times 3 channels); an
    all-false mask yields 0 with a warning rather than NaN.
    """
    a = _to_tensor(image_i)
    b = _to_tensor(image_j, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValidationError("consistency loss needs images of equal shape")
    m = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
    if m.shape != tuple(a.shape[:2]):
        raise ValidationError("mask shape must match the images")
    count = int(m.sum())
    if count == 0:
        warnings.warn("consistency loss over an all-false mask; returning 0")
        return torch.zeros((), dtype=a.dtype)
    warped = warp(b, flow)
    mt = torch.from_numpy(m).to(a.device)
    diff = (a - warped)[mt]
    return (diff ** 2).sum() / (count * 3)


def total_loss(parts, weights: LossWeights):
    """content + w_s * style + w_c * consistency."""
    content, style, consistency = parts
    return content + weights.w_s * style + weights.w_c * consistency
