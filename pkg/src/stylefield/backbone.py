"""Geometric stage: image features, epipolar aggregation, ray fusion, color.

A conv feature net embeds each source view; for every sampled point on a
target ray, features are gathered at the point's projection into each source
view and fused by a cross-view attention stack; a second attention stack
fuses the per-point features along the ray into a single ray feature, which a
small MLP maps to color.  No volume rendering equation is involved: the ray
feature itself carries the rendering.

The whole stage is trained once with a photometric loss and then frozen; the
stylization path only reads its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .scene_io import Camera, SceneBundle


@dataclass(frozen=True)
class BackboneConfig:
    d_feat: int = 32
    d_point: int = 64
    d_ray: int = 64
    view_blocks: int = 2
    ray_blocks: int = 2
    heads: int = 2
    k_samples: int = 32
    downscale: int = 4
    color_hidden: int = 64

    def to_dict(self):
        return self.__dict__.copy()


@dataclass(frozen=True)
class RaySample:
    origin: np.ndarray
    direction: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValidationError("ray direction must be a unit vector")
        depths = np.asarray(self.depths, dtype=np.float64)
        if len(depths) < 2 or np.any(np.diff(depths) <= 0):
            raise ValidationError("depths must be strictly increasing, K >= 2")


# ---------------------------------------------------------------------------
# Projection and ray sampling (pure geometry, no learned state)
# ---------------------------------------------------------------------------

def project_point(p, cam: Camera):
    """Project a world point; returns (uv, depth, in_frustum).

    Points at or behind the camera plane report ``in_frustum=False`` rather
    than raising.
    """
    p = np.asarray(p, dtype=np.float64)
    cam_pt = cam.rotation @ p + cam.translation
    depth = float(cam_pt[2])
    z = depth if abs(depth) > 1e-8 else 1e-8
    uv = np.array([
        cam.fx * cam_pt[0] / z + cam.cx,
        cam.fy * cam_pt[1] / z + cam.cy,
    ])
    in_frustum = (
        depth > 1e-8
        and cam.near < depth < cam.far
        and 0 <= uv[0] <= cam.width - 1
        and 0 <= uv[1] <= cam.height - 1
    )
    return uv, depth, bool(in_frustum)


def _pixel_dirs(cam: Camera, pixels: np.ndarray) -> np.ndarray:
    d_cam = np.stack([
        (pixels[:, 0] - cam.cx) / cam.fx,
        (pixels[:, 1] - cam.cy) / cam.fy,
        np.ones(len(pixels)),
    ], axis=1)
    d_world = d_cam @ cam.rotation
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def stratified_depths(near, far, k, n=1, jitter=False, rng=None):
    """(n, k) depth samples, one per stratification bin."""
    if k < 2:
        raise ValidationError("need at least 2 samples per ray")
    edges = np.linspace(near, far, k + 1)
    lo, hi = edges[:-1], edges[1:]
    if jitter:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.uniform(size=(n, k))
    else:
        u = np.full((n, k), 0.5)
    return lo[None, :] + u * (hi - lo)[None, :]


def sample_ray(cam: Camera, pixel, k: int, jitter: bool = False, seed=None) -> RaySample:
    pixel = np.asarray(pixel, dtype=np.float64)
    if not (0 <= pixel[0] <= cam.width - 1 and 0 <= pixel[1] <= cam.height - 1):
        raise ValidationError("pixel outside image bounds")
    rng = np.random.default_rng(seed) if jitter else None
    depths = stratified_depths(cam.near, cam.far, k, n=1, jitter=jitter, rng=rng)[0]
    direction = _pixel_dirs(cam, pixel[None, :])[0]
    return RaySample(origin=cam.center, direction=direction, depths=depths)


# ---------------------------------------------------------------------------
# Attention primitives
# ---------------------------------------------------------------------------

def masked_attention(q, k, v, mask):
    """Multi-head scaled dot-product attention with a key validity mask.

    q: (N, H, Dh); k, v: (N, V, H, Dh); mask: (N, V) bool tensor.  Rows with
    no valid key produce zeros.
    """
    scores = torch.einsum("nhd,nvhd->nhv", q, k) / (q.shape[-1] ** 0.5)
    neg = torch.finfo(scores.dtype).min / 4
    scores = scores.masked_fill(~mask[:, None, :], neg)
    attn = torch.softmax(scores, dim=-1)
    out = torch.einsum("nhv,nvhd->nhd", attn, v)
    any_valid = mask.any(dim=1)
    return out * any_valid[:, None, None].to(out.dtype)


class CrossViewBlock(nn.Module):
    """One block of per-point cross-view attention plus a feed-forward."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValidationError("dim must divide evenly into heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, query, tokens, mask):
        n, vcount, dim = tokens.shape
        dh = dim // self.heads
        qh = self.q(query).view(n, self.heads, dh)
        kh = self.k(tokens).view(n, vcount, self.heads, dh)
        vh = self.v(tokens).view(n, vcount, self.heads, dh)
        a = masked_attention(qh, kh, vh, mask).reshape(n, dim)
        query = query + self.out(a)
        return query + self.ff(query)


class RayBlock(nn.Module):
    """Self-attention over the point tokens of each ray."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        r, k, dim = x.shape
        dh = dim // self.heads
        qh = self.q(x).view(r, k, self.heads, dh)
        kh = self.k(x).view(r, k, self.heads, dh)
        vh = self.v(x).view(r, k, self.heads, dh)
        scores = torch.einsum("rqhd,rkhd->rhqk", qh, kh) / (dh ** 0.5)
        attn = torch.softmax(scores, dim=-1)
        a = torch.einsum("rhqk,rkhd->rqhd", attn, vh).reshape(r, k, dim)
        x = x + self.out(a)
        return x + self.ff(x)


def _depth_encoding(z, dtype):
    """Sinusoidal encoding (8 dims) of depths normalized to [0, 1]."""
    freqs = np.array([1.0, 2.0, 4.0, 8.0])
    ang = 2 * np.pi * z[..., None] * freqs
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return torch.from_numpy(enc).to(dtype)


class GeometryNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.downscale != 4:
            raise ValidationError("feature net is built for downscale 4")
        self.feature_net = nn.Sequential(
            nn.Conv2d(3, cfg.d_feat, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(cfg.d_feat, cfg.d_feat, 3, stride=2, padding=1),
        )
        self.token_proj = nn.Linear(cfg.d_feat + 4, cfg.d_point)
        self.view_blocks = nn.ModuleList(
            CrossViewBlock(cfg.d_point, cfg.heads) for _ in range(cfg.view_blocks)
        )
        self.depth_embed = nn.Linear(8, cfg.d_point)
        self.ray_blocks = nn.ModuleList(
            RayBlock(cfg.d_point, cfg.heads) for _ in range(cfg.ray_blocks)
        )
        self.ray_out = nn.Linear(cfg.d_point, cfg.d_ray)
        self.color = nn.Sequential(
            nn.Linear(cfg.d_ray, cfg.color_hidden),
            nn.GELU(),
            nn.Linear(cfg.color_hidden, 3),
        )




class Backbone:
    """Learned geometric stage with an explicit frozen flag.

    Construction is deterministic given the seed.  When frozen, no parameter
    receives gradients or optimizer updates.
    """

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), seed: int = 0,
                 dtype=torch.float32):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.net = GeometryNet(cfg).to(dtype)
        torch.random.set_rng_state(gen_state)
        self.cfg = cfg
        self.dtype = dtype
        self.frozen = False

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def parameters(self):
        return self.net.parameters()

    # -- per-view features -------------------------------------------------
    def extract_features(self, image):
        """Conv features for one source image; (H/4, W/4, d_feat)."""
        img = np.asarray(image, dtype=np.float64) if not isinstance(image, torch.Tensor) else None
        t = image if img is None else torch.from_numpy(img).to(self.dtype)
        if not torch.all(torch.isfinite(t)):
            raise ValidationError("image contains non-finite pixels")
        x = t.permute(2, 0, 1).unsqueeze(0).to(self.dtype)
        vol = self.net.feature_net(x)[0].permute(1, 2, 0)
        return vol

    # -- epipolar aggregation ---------------------------------------------
    def view_transform(self, points, target_dirs, volumes, cameras):
        """Fuse source-view features for a batch of 3D points.

        points, target_dirs: (N, 3) numpy.  Returns (N, d_point) tensor;
        points visible in zero views map to the zero vector.
        """
        n = len(points)
        vcount = len(volumes)
        if vcount == 0:
            raise ValidationError("need at least one source view")
        rots = np.stack([c.rotation for c in cameras])          # (V, 3, 3)
        trans = np.stack([c.translation for c in cameras])      # (V, 3)
        centers = np.stack([c.center for c in cameras])
        fx = np.array([c.fx for c in cameras])[:, None]
        fy = np.array([c.fy for c in cameras])[:, None]
        cx = np.array([c.cx for c in cameras])[:, None]
        cy = np.array([c.cy for c in cameras])[:, None]
        wlim = np.array([c.width - 1 for c in cameras])[:, None]
        hlim = np.array([c.height - 1 for c in cameras])[:, None]
        near = np.array([c.near for c in cameras])[:, None]
        far = np.array([c.far for c in cameras])[:, None]

        cam_pts = np.einsum("vij,nj->vni", rots, points) + trans[:, None, :]
        z = cam_pts[..., 2]
        z_safe = np.where(np.abs(z) > 1e-8, z, 1e-8)
        u = fx * cam_pts[..., 0] / z_safe + cx
        v = fy * cam_pts[..., 1] / z_safe + cy
        ok = (
            (z > 1e-8) & (z > near) & (z < far)
            & (u >= 0) & (u <= wlim) & (v >= 0) & (v <= hlim)
        )

        vols = torch.stack(list(volumes))                       # (V, Hf, Wf, D)
        hf, wf = vols.shape[1:3]
        xg = np.clip(u / self.cfg.downscale, 0.0, wf - 1.0)
        yg = np.clip(v / self.cfg.downscale, 0.0, hf - 1.0)
        x0 = np.clip(np.floor(xg).astype(np.int64), 0, wf - 2)
        y0 = np.clip(np.floor(yg).astype(np.int64), 0, hf - 2)
        fxw = torch.from_numpy(xg - x0).to(vols.dtype)[..., None]
        fyw = torch.from_numpy(yg - y0).to(vols.dtype)[..., None]
        vidx = torch.arange(vcount)[:, None].expand(vcount, n)
        x0t = torch.from_numpy(x0)
        y0t = torch.from_numpy(y0)
        feats = (
            vols[vidx, y0t, x0t] * (1 - fxw) * (1 - fyw)
            + vols[vidx, y0t, x0t + 1] * fxw * (1 - fyw)
            + vols[vidx, y0t + 1, x0t] * (1 - fxw) * fyw
            + vols[vidx, y0t + 1, x0t + 1] * fxw * fyw
        )                                                       # (V, N, D)

        d_src = points[None, :, :] - centers[:, None, :]
        d_src = d_src / np.maximum(np.linalg.norm(d_src, axis=2, keepdims=True), 1e-12)
        dot = (target_dirs[None] * d_src).sum(axis=2, keepdims=True)
        enc = np.concatenate([dot, target_dirs[None] - d_src], axis=2)
        enc_t = torch.from_numpy(enc).to(feats.dtype)

        tokens = torch.cat([feats, enc_t], dim=2).transpose(0, 1)  # (N, V, d_feat+4)
        mask = torch.from_numpy(ok).transpose(0, 1)                # (N, V)
        tokens = self.net.token_proj(tokens)
        mf = mask.to(tokens.dtype)[:, :, None]
        denom = mf.sum(dim=1).clamp(min=1.0)
        query = (tokens * mf).sum(dim=1) / denom
        for block in self.net.view_blocks:
            query = block(query, tokens, mask)
        any_valid = mask.any(dim=1)
        return query * any_valid[:, None].to(query.dtype)

    # -- ray fusion --------------------------------------------------------
    def ray_transform(self, point_features, depths=None, near=None, far=None):
        """Fuse (R, K, d_point) point features into (R, d_ray) ray features."""
        x = point_features
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.shape[1] < 2:
            raise ValidationError("a ray needs at least 2 point samples")
        if not torch.all(torch.isfinite(x)):
            raise ValidationError("non-finite point features")
        if depths is not None:
            z = (np.asarray(depths) - near) / (far - near)
            x = x + self.net.depth_embed(_depth_encoding(z, x.dtype))
        for block in self.net.ray_blocks:
            x = block(x)
        return self.net.ray_out(x.mean(dim=1))

    # -- color -------------------------------------------------------------
    def color_head(self, ray_features):
        """Map ray features to RGB in [0, 1]."""
        return torch.sigmoid(self.net.color(ray_features))

    # -- rendering ---------------------------------------------------------
    def render_rays(self, volumes, cameras, target_cam, pixels,
                    feature_transform=None, jitter=False, rng=None,
                    return_features=False):
        """Render a batch of rays given precomputed source-view volumes.

        pixels: (M, 2) pixel coordinates in the target camera.
        """
        m = len(pixels)
        k = self.cfg.k_samples
        depths = stratified_depths(target_cam.near, target_cam.far, k, n=m,
                                   jitter=jitter, rng=rng)
        dirs = _pixel_dirs(target_cam, pixels)
        origin = target_cam.center
        points = origin[None, None, :] + depths[:, :, None] * dirs[:, None, :]
        flat_pts = points.reshape(-1, 3)
        flat_dirs = np.repeat(dirs, k, axis=0)
        pf = self.view_transform(flat_pts, flat_dirs, volumes, cameras)
        pf = pf.view(m, k, -1)
        rf = self.ray_transform(pf, depths=depths, near=target_cam.near,
                                far=target_cam.far)
        if feature_transform is not None:
            rf = feature_transform(rf)
        rgb = self.color_head(rf)
        if return_features:
            return rgb, rf
        return rgb

    def ray_feature_map(self, scene: SceneBundle, target_cam: Camera,
                        exclude_view=None, chunk: int = 4096):
        """Ray features for every pixel of a target view; (H, W, d_ray)."""
        volumes, cameras = self._source_volumes(scene, exclude_view)
        h, w = target_cam.height, target_cam.width
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        outs = []
        for start in range(0, len(pixels), chunk):
            _, rf = self.render_rays(volumes, cameras, target_cam,
                                     pixels[start:start + chunk],
                                     return_features=True)
            outs.append(rf)
        return torch.cat(outs, dim=0).view(h, w, -1)

    def _source_volumes(self, scene: SceneBundle, exclude_view=None):
        volumes = []
        cameras = []
        for idx, (img, cam) in enumerate(scene.views):
            if idx == exclude_view:
                continue
            volumes.append(self.extract_features(img))
            cameras.append(cam)
        if not volumes:
            raise ValidationError("no source views left after exclusion")
        return volumes, cameras

    def render_view(self, scene: SceneBundle, target_cam: Camera,
                    stylize=None, exclude_view=None, chunk: int = 4096):
        """Render a full novel view; returns an (H, W, 3) tensor in [0, 1].

        ``stylize`` is an optional callable applied to each ray feature
        before the color head (e.g. a hypernetwork-generated MLP).
        """
        if scene.image_shape != (target_cam.height, target_cam.width):
            raise ValidationError("target resolution differs from scene images")
        volumes, cameras = self._source_volumes(scene, exclude_view)
        h, w = target_cam.height, target_cam.width
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        rows = []
        for start in range(0, len(pixels), chunk):
            rgb = self.render_rays(volumes, cameras, target_cam,
                                   pixels[start:start + chunk],
                                   feature_transform=stylize)
            rows.append(rgb)
        return torch.cat(rows, dim=0).view(h, w, 3)
