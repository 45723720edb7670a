"""Style encoding and hypernetwork-generated feature transformation.

A small VAE is trained on style images; only the mean half of its encoder
output is used downstream as the style latent.  A two-layer hypernetwork
maps the latent to all weights and biases of an intermediate two-layer MLP,
which re-styles ray features in residual form: out = f + mlp(f).  With the
hypernetwork's output layer zero-initialized the transformation is exactly
the identity, so an untrained stylizer leaves renders untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import StateError, ValidationError
from .scene_io import SceneBundle, StyleImage


@dataclass(frozen=True)
class StylizerConfig:
    d_latent: int = 64       # desk scale; 512 reproduces the full-size setup
    d_ray: int = 64
    d_hidden: int = 128      # hidden width of the generated MLP
    hyper_hidden: int = 64
    vae_size: int = 32       # style images are resized to this before encoding

    @property
    def mlp_param_count(self) -> int:
        d_r, d_h = self.d_ray, self.d_hidden
        return d_r * d_h + d_h + d_h * d_r + d_r

    def to_dict(self):
        return self.__dict__.copy()


@dataclass(frozen=True)
class StyleLatent:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise ValidationError("style latent must be a finite vector")
        object.__setattr__(self, "z", z)


@dataclass
class StylizedMLP:
    """Generated two-layer MLP, applied residually to ray features."""

    w1: torch.Tensor  # (d_hidden, d_ray)
    b1: torch.Tensor
    w2: torch.Tensor  # (d_ray, d_hidden)
    b2: torch.Tensor

    def __call__(self, f):
        return apply_stylized(f, self)


def apply_stylized(f, m: StylizedMLP):
    """stylized = f + W2 relu(W1 f + b1) + b2, batched over leading dims."""
    if isinstance(f, np.ndarray):
        f = torch.from_numpy(f).to(m.w1.dtype)
    if f.shape[-1] != m.w1.shape[1]:
        raise ValidationError("ray feature dimension mismatch")
    hidden = F.relu(f.to(m.w1.dtype) @ m.w1.T + m.b1)
    return f + hidden @ m.w2.T + m.b2


# ---------------------------------------------------------------------------
# Style VAE
# ---------------------------------------------------------------------------

class StyleVAENet(nn.Module):
    def __init__(self, cfg: StylizerConfig):
        super().__init__()
        s = cfg.vae_size
        if s % 8:
            raise ValidationError("vae_size must be divisible by 8")
        self.cfg = cfg
        flat = 64 * (s // 8) ** 2
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(flat, 2 * cfg.d_latent),
        )
        self.dec_in = nn.Linear(cfg.d_latent, flat)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
        )

    def encode(self, x):
        out = self.encoder(x)
        mu, log_var = out.chunk(2, dim=1)
        return mu, log_var

    def decode(self, z):
        s = self.cfg.vae_size // 8
        h = self.dec_in(z).view(-1, 64, s, s)
        return torch.sigmoid(self.decoder(h))


@dataclass
class StyleVAEParams:
    net: StyleVAENet
    cfg: StylizerConfig
    trained: bool = False
    frozen: bool = False

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self


def _style_batch(styles, size, dtype):
    imgs = [resize_style(s, size) for s in styles]
    arr = np.stack(imgs).transpose(0, 3, 1, 2)
    return torch.from_numpy(arr).to(dtype)


def resize_style(style: StyleImage, size: int) -> np.ndarray:
    px = np.clip(style.pixels, 0.0, 1.0)
    im = Image.fromarray((px * 255.0).round().astype(np.uint8))
    im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) / 255.0


def kl_divergence(mu, log_var):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, mean over batch."""
    return (-0.5 * (1 + log_var - mu ** 2 - log_var.exp())).sum(dim=1).mean()


def train_style_vae(styles, epochs: int = 50, seed: int = 0,
                    cfg: StylizerConfig = StylizerConfig(), lr: float = 1e-3,
                    kl_weight: float = 1e-3, dtype=torch.float32) -> StyleVAEParams:
    """Train the style VAE; deterministic given the seed.

    Returns trained params (not yet frozen; call ``.freeze()`` before use in
    the stylization stage).
    """
    if len(styles) < 2:
        raise ValidationError("need at least 2 style images to train the VAE")
    gen = torch.Generator().manual_seed(seed)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = StyleVAENet(cfg).to(dtype)
    torch.random.set_rng_state(state)
    batch = _style_batch(styles, cfg.vae_size, dtype)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        mu, log_var = net.encode(batch)
        noise = torch.randn(mu.shape, generator=gen, dtype=dtype)
        z = mu + noise * torch.exp(0.5 * log_var)
        recon = net.decode(z)
        loss = F.mse_loss(recon, batch) + kl_weight * kl_divergence(mu, log_var)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return StyleVAEParams(net=net, cfg=cfg, trained=True)


def vae_loss(styles, params: StyleVAEParams, kl_weight: float = 1e-3):
    """Deterministic (noise-free) objective value, for before/after checks."""
    dtype = next(params.net.parameters()).dtype
    batch = _style_batch(styles, params.cfg.vae_size, dtype)
    with torch.no_grad():
        mu, log_var = params.net.encode(batch)
        recon = params.net.decode(mu)
        return float(F.mse_loss(recon, batch) + kl_weight * kl_divergence(mu, log_var))


def encode_style(style: StyleImage, params: StyleVAEParams) -> StyleLatent:
    """Mean half of the encoder output; deterministic, no sampling."""
    if not params.trained:
        raise StateError("style VAE has not been trained")
    dtype = next(params.net.parameters()).dtype
    batch = _style_batch([style], params.cfg.vae_size, dtype)
    with torch.no_grad():
        mu, _ = params.net.encode(batch)
    return StyleLatent(z=mu[0].numpy().astype(np.float64))


# ---------------------------------------------------------------------------
# Hypernetwork
# ---------------------------------------------------------------------------

class HyperNetModule(nn.Module):
    def __init__(self, cfg: StylizerConfig):
        super().__init__()
        self.cfg = cfg
        self.body = nn.Sequential(
            nn.Linear(cfg.d_latent, cfg.hyper_hidden),
            nn.ReLU(),
            nn.Linear(cfg.hyper_hidden, cfg.mlp_param_count),
        )
        # identity initialization: zero output layer means the generated MLP
        # is all-zero, and the residual application reduces to the identity
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)


@dataclass
class HyperNetParams:
    net: HyperNetModule
    cfg: StylizerConfig

    def parameters(self):
        return self.net.parameters()


def init_hypernet(cfg: StylizerConfig = StylizerConfig(), seed: int = 0,
                  dtype=torch.float32) -> HyperNetParams:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = HyperNetModule(cfg).to(dtype)
    torch.random.set_rng_state(state)
    return HyperNetParams(net=net, cfg=cfg)


def hyper_generate(z_s: StyleLatent, hp: HyperNetParams) -> StylizedMLP:
    """Generate the intermediate MLP's weights from a style latent."""
    cfg = hp.cfg
    if len(z_s.z) != cfg.d_latent:
        raise ValidationError(
            f"latent has {len(z_s.z)} dims, hypernetwork expects {cfg.d_latent}"
        )
    dtype = next(hp.net.parameters()).dtype
    zt = torch.from_numpy(z_s.z).to(dtype)
    flat = hp.net.body(zt)
    d_r, d_h = cfg.d_ray, cfg.d_hidden
    sizes = [d_r * d_h, d_h, d_h * d_r, d_r]
    w1, b1, w2, b2 = torch.split(flat, sizes)
    return StylizedMLP(
        w1=w1.view(d_h, d_r), b1=b1, w2=w2.view(d_r, d_h), b2=b2,
    )


def stylize_render(scene: SceneBundle, target_cam, style: StyleImage,
                   backbone, vae: StyleVAEParams, hp: HyperNetParams,
                   exclude_view=None, chunk: int = 4096):
    """Full stylized novel view: encode style, generate MLP once, render.

    The generated weights are reused across every ray of the image.
    """
    z = encode_style(style, vae)
    mlp = hyper_generate(z, hp)
    return backbone.render_view(scene, target_cam, stylize=mlp,
                                exclude_view=exclude_view, chunk=chunk)
