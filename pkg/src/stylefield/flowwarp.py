"""Backward warping, visibility masks, and a naive block-matching flow.

Follows the package-wide flow convention (see ``scene_io``): a flow field
for a (j, i) view pair lives on view i's pixel grid and maps i-pixels to
j-coordinates, so ``warp(view_j, flow)`` lands in view i's frame.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ValidationError
from .scene_io import FlowField, VisibilityMask


def _flow_array(flow) -> np.ndarray:
    if isinstance(flow, FlowField):
        return flow.flow
    return np.asarray(flow)


def warp(image, flow):
    """Backward-warp: output(p) = bilinear sample of ``image`` at p + flow(p).

    Sample points outside the image bounds produce zeros.  Accepts a numpy
    array or a torch tensor image (HxWxC); the torch path is differentiable
    in the pixel values.
    """
    fl = _flow_array(flow)
    if isinstance(image, torch.Tensor):
        return _warp_torch(image, fl)
    return _warp_numpy(np.asarray(image), fl)


def _sample_coords(fl, h, w):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = xs + fl[..., 0]
    sy = ys + fl[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 2)
    wx = np.clip(sx - x0, 0.0, 1.0)
    wy = np.clip(sy - y0, 0.0, 1.0)
    return x0, y0, wx, wy, inside


def _check_shapes(img_shape, fl):
    if fl.ndim != 3 or fl.shape[2] != 2:
        raise ValidationError("flow must be HxWx2")
    if img_shape[:2] != fl.shape[:2]:
        raise ValidationError(
            f"image {img_shape[:2]} and flow {fl.shape[:2]} shapes disagree"
        )


def _warp_numpy(image, fl):
    _check_shapes(image.shape, fl)
    h, w = image.shape[:2]
    x0, y0, wx, wy, inside = _sample_coords(fl, h, w)
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    c00 = img[y0, x0]
    c01 = img[y0, x0 + 1]
    c10 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    out = (
        c00 * ((1 - wx) * (1 - wy))[..., None]
        + c01 * (wx * (1 - wy))[..., None]
        + c10 * ((1 - wx) * wy)[..., None]
        + c11 * (wx * wy)[..., None]
    )
    out = out * inside[..., None]
    return out[..., 0] if squeeze else out


def _warp_torch(image, fl):
    _check_shapes(tuple(image.shape), fl)
    h, w = image.shape[:2]
    x0, y0, wx, wy, inside = _sample_coords(fl, h, w)
    dev, dt = image.device, image.dtype
    x0t = torch.from_numpy(x0).to(dev)
    y0t = torch.from_numpy(y0).to(dev)
    wxt = torch.from_numpy(wx).to(device=dev, dtype=dt)
    wyt = torch.from_numpy(wy).to(device=dev, dtype=dt)
    ins = torch.from_numpy(inside).to(device=dev, dtype=dt)
    squeeze = image.ndim == 2
    img = image.unsqueeze(-1) if squeeze else image
    c00 = img[y0t, x0t]
    c01 = img[y0t, x0t + 1]
    c10 = img[y0t + 1, x0t]
    c11 = img[y0t + 1, x0t + 1]
    out = (
        c00 * ((1 - wxt) * (1 - wyt)).unsqueeze(-1)
        + c01 * (wxt * (1 - wyt)).unsqueeze(-1)
        + c10 * ((1 - wxt) * wyt).unsqueeze(-1)
        + c11 * (wxt * wyt).unsqueeze(-1)
    )
    out = out * ins.unsqueeze(-1)
    return out.squeeze(-1) if squeeze else out


def visibility_mask(flow_fwd, flow_bwd, tau: float = 1.0) -> VisibilityMask:
    """Forward-backward consistency mask.

    ``flow_fwd`` is the (j, i) flow on view i's grid; ``flow_bwd`` the (i, j)
    flow on view j's grid.  A pixel is visible iff its round trip returns
    within ``tau`` pixels and the forward sample point stays in bounds.
    """
    ff = _flow_array(flow_fwd)
    fb = _flow_array(flow_bwd)
    if ff.shape != fb.shape:
        raise ValidationError("forward and backward flows must share shape")
    h, w = ff.shape[:2]
    bwd_at_fwd = _warp_numpy(fb.astype(np.float64), ff)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = xs + ff[..., 0]
    sy = ys + ff[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    round_trip = np.linalg.norm(ff + bwd_at_fwd, axis=2)
    return VisibilityMask(mask=inside & (round_trip <= tau))


def estimate_flow_naive(img_a, img_b, block: int = 8, radius: int = 4) -> FlowField:
    """Integer block-matching flow from ``img_b``'s grid into ``img_a``.

    Minimizes per-block sum of absolute differences over displacements up to
    ``radius``; ties break toward the smallest displacement, so textureless
    input yields zero flow.  Smoke-test quality only: integer-valued, blocky.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("images must share shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if block > min(h, w):
        raise ValidationError("block size exceeds image size")

    nby = (h + block - 1) // block
    nbx = (w + block - 1) // block
    pad = radius
    a_pad = np.pad(a, ((pad, pad), (pad, pad), (0, 0)), mode="edge")

    disps = [(dx, dy) for dy in range(-radius, radius + 1)
             for dx in range(-radius, radius + 1)]
    disps.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))

    best_cost = np.full((nby, nbx), np.inf)
    best = np.zeros((nby, nbx, 2), dtype=np.float32)
    for dx, dy in disps:
        shifted = a_pad[pad + dy: pad + dy + h, pad + dx: pad + dx + w]
        err = np.abs(b - shifted).sum(axis=2)
        cost = np.add.reduceat(
            np.add.reduceat(err, np.arange(0, h, block), axis=0),
            np.arange(0, w, block), axis=1,
        )
        better = cost < best_cost - 1e-12
        best_cost = np.where(better, cost, best_cost)
        best[better] = (dx, dy)

    flow = np.repeat(np.repeat(best, block, axis=0), block, axis=1)[:h, :w]
    return FlowField(flow=flow)
