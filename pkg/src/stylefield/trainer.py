"""Two-stage training: geometry pretraining, then hypernetwork stylization.

Stage one trains the geometric backbone with a leave-one-out photometric
loss.  Stage two freezes the backbone and the style encoder and optimizes
only the hypernetwork against the content + style + consistency objective.
Because the backbone is frozen, per-view ray features are precomputed once
and reused every step, which keeps desk-scale stylization runs fast.

Checkpoints are single-file archives with a format tag; training state
checkpoints additionally carry optimizer and RNG state so a resumed run
reproduces the uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses, stylizer
from .backbone import Backbone, BackboneConfig
from .errors import FormatError, StateError, ValidationError
from .losses import FeatureExtractor, LossWeights
from .scene_io import SceneBundle
from .stylizer import (HyperNetParams, StyleVAEParams, StylizerConfig,
                       StyleVAENet, HyperNetModule, apply_stylized,
                       hyper_generate, init_hypernet)

ENV_PREFIX = "STYLEFIELD_"


@dataclass
class TrainConfig:
    stage: str = "style"             # "geometry" or "style"
    lr: float = 1e-3
    batch: int = 16                  # style-stage batching unit (view pairs per log window)
    epochs: int = 500
    steps: int | None = None         # overrides epochs-derived step count when set
    seed: int = 0
    resolution: int = 64
    k_samples: int = 32
    ray_batch: int = 256             # rays per geometry step
    w_style: float = 0.7
    w_consistency: float = 3.5
    content_layers: tuple = (2, 3)
    phi_seed: int = 0
    phi_weights_path: str | None = None
    content_target: str = "render"   # "render" or "photo"
    mask_tau_px: float = 1.0
    min_mask_coverage: float = 0.2
    max_pair_angle: float = 25.0     # degrees; pairs further apart are skipped
    train_flow_source: str = "exact"
    eval_flow_source: str = "naive"
    cosine_decay: bool = True
    deterministic: bool = True
    dtype: str = "float32"
    scene_dir: str | None = None
    style_dir: str | None = None
    d_latent: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.stage not in ("geometry", "style"):
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.content_target not in ("render", "photo"):
            raise ValidationError("content_target must be 'render' or 'photo'")
        self.content_layers = tuple(self.content_layers)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["content_layers"] = list(self.content_layers)
        return d


def load_config(path=None, overrides=None) -> TrainConfig:
    """Defaults < STYLEFIELD_* env vars < config file < explicit overrides."""
    values = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for name in fields:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = _coerce(env)
    if path is not None:
        data = json.loads(Path(path).read_text())
        for k, v in data.items():
            if k not in fields:
                raise ValidationError(f"unknown config key {k!r}")
            values[k] = v
    for k, v in (overrides or {}).items():
        if k not in fields:
            raise ValidationError(f"unknown config key {k!r}")
        values[k] = _coerce(v) if isinstance(v, str) else v
    return TrainConfig(**values)


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------------------
# Checkpoint archives
# ---------------------------------------------------------------------------

BACKBONE_TAG = "backbone-v1"
STYLEVAE_TAG = "stylevae-v1"
HYPERNET_TAG = "hypernet-v1"
GEO_STATE_TAG = "geo-train-v1"
STYLE_STATE_TAG = "style-train-v1"
BUNDLE_TAG = "bundle-v1"


def save_archive(path, tag: str, payload: dict) -> None:
    """Atomic single-file save (write temp, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": tag, **payload}, tmp)
    os.replace(tmp, path)


def load_archive(path, tag: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}; run the producing "
                         "stage first or pass the correct path")
    try:
        data = torch.load(path, weights_only=False)
    except Exception as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    found = data.get("format")
    if found != tag:
        raise FormatError(f"checkpoint {path} has tag {found!r}, expected {tag!r}")
    return data


def save_backbone(backbone: Backbone, path) -> None:
    save_archive(path, BACKBONE_TAG, {
        "config": backbone.cfg.to_dict(),
        "dtype": str(backbone.dtype).split(".")[-1],
        "state": backbone.net.state_dict(),
        "frozen": backbone.frozen,
    })


def load_backbone(path) -> Backbone:
    data = load_archive(path, BACKBONE_TAG)
    cfg = BackboneConfig(**data["config"])
    dtype = {"float32": torch.float32, "float64": torch.float64}[data["dtype"]]
    bb = Backbone(cfg, seed=0, dtype=dtype)
    bb.net.load_state_dict(data["state"])
    if data["frozen"]:
        bb.freeze()
    return bb


def save_stylevae(params: StyleVAEParams, path) -> None:
    save_archive(path, STYLEVAE_TAG, {
        "config": params.cfg.to_dict(),
        "state": params.net.state_dict(),
        "trained": params.trained,
    })


def load_stylevae(path) -> StyleVAEParams:
    data = load_archive(path, STYLEVAE_TAG)
    cfg = StylizerConfig(**data["config"])
    net = StyleVAENet(cfg)
    net.load_state_dict(data["state"])
    return StyleVAEParams(net=net, cfg=cfg, trained=data["trained"])


def save_hypernet(params: HyperNetParams, path) -> None:
    save_archive(path, HYPERNET_TAG, {
        "config": params.cfg.to_dict(),
        "state": params.net.state_dict(),
    })


def load_hypernet(path) -> HyperNetParams:
    data = load_archive(path, HYPERNET_TAG)
    cfg = StylizerConfig(**data["config"])
    net = HyperNetModule(cfg)
    net.load_state_dict(data["state"])
    return HyperNetParams(net=net, cfg=cfg)


def save_bundle(path, backbone_path, stylevae_path, hypernet_path) -> None:
    """One-command rendering bundle referencing the three checkpoints."""
    payload = {
        "format": BUNDLE_TAG,
        "backbone": str(backbone_path),
        "stylevae": str(stylevae_path),
        "hypernet": str(hypernet_path),
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_bundle(path):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise StateError(f"bundle not found: {path}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable bundle: {exc}") from exc
    if data.get("format") != BUNDLE_TAG:
        raise FormatError(f"bundle {path} has tag {data.get('format')!r}")
    base = Path(path).parent
    def _resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p
    return (
        load_backbone(_resolve(data["backbone"])),
        load_stylevae(_resolve(data["stylevae"])),
        load_hypernet(_resolve(data["hypernet"])),
    )


# ---------------------------------------------------------------------------
# Stage one: geometry pretraining
# ---------------------------------------------------------------------------

def _prep_determinism(cfg: TrainConfig):
    if cfg.deterministic:
        torch.set_num_threads(1)


def _set_lr(opt, base_lr, step, total, cosine):
    lr = base_lr
    if cosine and total > 1:
        lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    for group in opt.param_groups:
        group["lr"] = lr


def pretrain_geometry(scenes, cfg: TrainConfig, resume_path=None,
                      checkpoint_path=None, checkpoint_every=None,
                      max_steps=None, log=None):
    """Leave-one-out photometric training of the backbone.

    Each step renders a batch of rays of a held-out view from the remaining
    source views and minimizes the MSE against the ground-truth pixels.
    Returns ``(backbone, log)``; the backbone is returned unfrozen.
    """
    _prep_determinism(cfg)
    usable = []
    for s in scenes:
        if len(s.views) < 3:
            warnings.warn(f"scene {s.scene_id} has < 3 views; skipped")
            continue
        usable.append(s)
    if not usable:
        raise ValidationError("no trainable scenes (all have < 3 views)")

    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs
    dtype = cfg.torch_dtype
    bcfg = BackboneConfig(k_samples=cfg.k_samples)

    if resume_path is not None:
        data = load_archive(resume_path, GEO_STATE_TAG)
        backbone = Backbone(BackboneConfig(**data["backbone_config"]), seed=cfg.seed,
                            dtype=dtype)
        backbone.net.load_state_dict(data["model"])
        opt = torch.optim.Adam(backbone.net.parameters(), lr=cfg.lr)
        opt.load_state_dict(data["optimizer"])
        gen = torch.Generator()
        gen.set_state(data["rng"])
        start = data["step"]
    else:
        backbone = Backbone(bcfg, seed=cfg.seed, dtype=dtype)
        opt = torch.optim.Adam(backbone.net.parameters(), lr=cfg.lr)
        gen = torch.Generator().manual_seed(cfg.seed)
        start = 0

    log = [] if log is None else log
    stop = total_steps if max_steps is None else min(total_steps, start + max_steps)
    for step in range(start, stop):
        t0 = time.perf_counter()
        scene = usable[int(torch.randint(len(usable), (1,), generator=gen))]
        tgt = int(torch.randint(len(scene.views), (1,), generator=gen))
        img, cam = scene.views[tgt]
        h, w = img.shape[:2]
        flat = torch.randint(h * w, (cfg.ray_batch,), generator=gen).numpy()
        pixels = np.stack([flat % w, flat // w], axis=1).astype(np.float64)
        gt = torch.from_numpy(img.reshape(-1, 3)[flat]).to(dtype)

        volumes, cams = backbone._source_volumes(scene, exclude_view=tgt)
        rgb = backbone.render_rays(volumes, cams, cam, pixels)
        loss = ((rgb - gt) ** 2).mean()
        _set_lr(opt, cfg.lr, step, total_steps, cfg.cosine_decay)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({
            "step": step,
            "L_total": float(loss.detach()),
            "wall_ms": 1000 * (time.perf_counter() - t0),
        })
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            _save_geo_state(checkpoint_path, backbone, opt, gen, step + 1)

    if checkpoint_path:
        _save_geo_state(checkpoint_path, backbone, opt, gen, stop)
    return backbone, log


def _save_geo_state(path, backbone, opt, gen, step):
    save_archive(path, GEO_STATE_TAG, {
        "backbone_config": backbone.cfg.to_dict(),
        "model": backbone.net.state_dict(),
        "optimizer": opt.state_dict(),
        "rng": gen.get_state(),
        "step": step,
    })


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# Stage two: stylization training of the hypernetwork
# ---------------------------------------------------------------------------

def _pair_angle(cam_a, cam_b) -> float:
    """Angle in degrees between the two cameras' viewing directions."""
    za = cam_a.rotation[2]
    zb = cam_b.rotation[2]
    cosang = float(np.clip(np.dot(za, zb), -1.0, 1.0))
    return math.degrees(math.acos(cosang))


class SceneCache:
    """Frozen-backbone precomputation for one training scene."""

    def __init__(self, bundle: SceneBundle, flows, masks, backbone, cfg):
        self.bundle = bundle
        self.flows = flows
        self.masks = masks
        self.features = {}
        self.renders = {}
        self.pairs = []
        n = len(bundle.views)
        for i in range(n):
            for j in range(n):
                if i == j or (j, i) not in flows:
                    continue
                if _pair_angle(bundle.cameras[i], bundle.cameras[j]) > cfg.max_pair_angle:
                    continue
                cov = masks[(j, i)].mask.mean()
                if cov < cfg.min_mask_coverage:
                    continue
                self.pairs.append((i, j))
        needed = sorted({v for pair in self.pairs for v in pair})
        with torch.no_grad():
            for v in needed:
                fmap = backbone.ray_feature_map(bundle, bundle.cameras[v])
                self.features[v] = fmap
                self.renders[v] = backbone.color_head(fmap)


def train_stylization(scene_data, styles, backbone: Backbone,
                      vae: StyleVAEParams, cfg: TrainConfig,
                      resume_path=None, checkpoint_path=None,
                      checkpoint_every=None, max_steps=None, log=None):
    """Optimize the hypernetwork alone under the total stylization loss.

    ``scene_data`` is a list of ``(bundle, flows, masks)`` triples using the
    package flow convention.  The backbone and VAE must be frozen; only the
    hypernetwork receives gradient updates, starting from identity init.
    Returns ``(hypernet, log)``.
    """
    _prep_determinism(cfg)
    if not backbone.frozen:
        raise StateError("backbone must be frozen before stylization training")
    if not vae.frozen:
        raise StateError("style VAE must be frozen before stylization training")
    if not styles:
        raise ValidationError("need at least one training style")

    dtype = cfg.torch_dtype
    phi = _make_phi(cfg)
    caches = [SceneCache(b, f, m, backbone, cfg) for b, f, m in scene_data]
    caches = [c for c in caches if c.pairs]
    if not caches:
        raise ValidationError("no valid view pairs with flow and mask coverage")

    latents = [stylizer.encode_style(s, vae) for s in styles]
    weights = LossWeights(w_s=cfg.w_style, w_c=cfg.w_consistency)
    scfg = StylizerConfig(d_latent=vae.cfg.d_latent, d_ray=backbone.cfg.d_ray)

    total_pairs = sum(len(c.pairs) for c in caches)
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * total_pairs

    if resume_path is not None:
        data = load_archive(resume_path, STYLE_STATE_TAG)
        hp = HyperNetParams(net=HyperNetModule(StylizerConfig(**data["config"])).to(dtype),
                            cfg=StylizerConfig(**data["config"]))
        hp.net.load_state_dict(data["model"])
        opt = torch.optim.Adam(hp.net.parameters(), lr=cfg.lr)
        opt.load_state_dict(data["optimizer"])
        gen = torch.Generator()
        gen.set_state(data["rng"])
        start = data["step"]
    else:
        hp = init_hypernet(scfg, seed=cfg.seed, dtype=dtype)
        opt = torch.optim.Adam(hp.net.parameters(), lr=cfg.lr)
        gen = torch.Generator().manual_seed(cfg.seed)
        start = 0

    log = [] if log is None else log
    stop = total_steps if max_steps is None else min(total_steps, start + max_steps)
    for step in range(start, stop):
        t0 = time.perf_counter()
        cache = caches[int(torch.randint(len(caches), (1,), generator=gen))]
        i, j = cache.pairs[int(torch.randint(len(cache.pairs), (1,), generator=gen))]
        sidx = int(torch.randint(len(styles), (1,), generator=gen))
        mlp = hyper_generate(latents[sidx], hp)

        img_i = backbone.color_head(apply_stylized(cache.features[i], mlp))
        img_j = backbone.color_head(apply_stylized(cache.features[j], mlp))
        if cfg.content_target == "render":
            content_anchor = cache.renders[i]
        else:
            content_anchor = cache.bundle.images[i]
        l_content = losses.content_loss(content_anchor, img_i, phi, cfg.content_layers)
        l_style = losses.style_loss(styles[sidx].pixels, img_i, phi)
        l_cons = losses.consistency_loss(img_i, img_j, cache.flows[(j, i)],
                                         cache.masks[(j, i)])
        loss = losses.total_loss((l_content, l_style, l_cons), weights)

        _set_lr(opt, cfg.lr, step, total_steps, cfg.cosine_decay)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({
            "step": step,
            "L_content": float(l_content.detach()),
            "L_style": float(l_style.detach()),
            "L_consistency": float(l_cons.detach()),
            "L_total": float(loss.detach()),
            "wall_ms": 1000 * (time.perf_counter() - t0),
        })
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            _save_style_state(checkpoint_path, hp, opt, gen, step + 1)

    if checkpoint_path:
        _save_style_state(checkpoint_path, hp, opt, gen, stop)
    return hp, log


def _make_phi(cfg: TrainConfig) -> FeatureExtractor:
    if cfg.phi_weights_path:
        with np.load(cfg.phi_weights_path) as data:
            weights = [data[k] for k in sorted(data.files)]
        return FeatureExtractor(weights=weights)
    return FeatureExtractor(seed=cfg.phi_seed)


def _save_style_state(path, hp, opt, gen, step):
    save_archive(path, STYLE_STATE_TAG, {
        "config": hp.cfg.to_dict(),
        "model": hp.net.state_dict(),
        "optimizer": opt.state_dict(),
        "rng": gen.get_state(),
        "step": step,
    })


def write_log(log, path) -> None:
    """Line-delimited training log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")
