"""Scene, style and flow ingestion plus the synthetic ray-cast scene generator.

Everything that touches disk formats lives here: PNG images, the
``cameras.json`` manifest, Middlebury ``.flo`` flow files, and style image
folders.  The synthetic generator renders textured plane/box scenes with an
exact ray caster and produces analytically correct flow fields and visibility
masks, which the rest of the package uses as ground-truth oracles.

Flow convention (shared package-wide): a flow field ``F(j, i)`` is stored on
view ``i``'s pixel grid and maps view-i pixels to view-j coordinates, so that
backward-warping view j's image with it reproduces view i's frame.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConsistencyError, FormatError, ValidationError

_ROT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera: 3x3 intrinsics plus a 3x4 world-to-camera pose."""

    intrinsics: np.ndarray
    pose: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        P = np.asarray(self.pose, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValidationError(f"intrinsics must be 3x3, got {K.shape}")
        if P.shape != (3, 4):
            raise ValidationError(f"pose must be 3x4, got {P.shape}")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "pose", P)
        R = P[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValidationError("rotation block is not orthonormal")
        if np.linalg.det(R) < 1.0 - _ROT_TOL * 1e3:
            raise ValidationError("rotation block has determinant != +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise ValidationError("principal point outside image bounds")
        if not (0 < self.near < self.far):
            raise ValidationError("need 0 < near < far")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class SceneBundle:
    """An ordered multi-view capture: (image, camera) pairs plus an id."""

    views: tuple
    scene_id: str

    def __post_init__(self):
        views = tuple(self.views)
        object.__setattr__(self, "views", views)
        if len(views) < 2:
            raise ValidationError("a scene needs at least 2 views")
        h, w = views[0][0].shape[:2]
        near, far = views[0][1].near, views[0][1].far
        for img, cam in views:
            if img.shape[:2] != (h, w) or img.shape[2] != 3:
                raise ValidationError("all view images must share HxWx3 shape")
            if (cam.near, cam.far) != (near, far):
                raise ValidationError("all cameras must share near/far")

    @property
    def images(self):
        return [v[0] for v in self.views]

    @property
    def cameras(self):
        return [v[1] for v in self.views]

    @property
    def image_shape(self):
        return self.views[0][0].shape[:2]


@dataclass(frozen=True)
class StyleImage:
    pixels: np.ndarray
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError("style image must be HxWx3")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ValidationError("style image must be at least 16x16")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class FlowField:
    """Dense pixel displacements (x then y), stored on the dst view's grid."""

    flow: np.ndarray
    src_view: int = -1
    dst_view: int = -1

    def __post_init__(self):
        fl = np.asarray(self.flow, dtype=np.float32)
        if fl.ndim != 3 or fl.shape[2] != 2:
            raise ValidationError("flow must be HxWx2")
        if not np.all(np.isfinite(fl)):
            raise ValidationError("flow entries must be finite")
        object.__setattr__(self, "flow", fl)

    @property
    def shape(self):
        return self.flow.shape[:2]


@dataclass(frozen=True)
class VisibilityMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValidationError("mask must be HxW")
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.mask.shape


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(str(path))


def load_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def downsample_area(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsampling by an integer factor (crops the remainder)."""
    if factor < 1:
        raise ValidationError("downsample factor must be >= 1")
    if factor == 1:
        return image
    h, w = image.shape[:2]
    h2, w2 = h // factor, w // factor
    img = image[: h2 * factor, : w2 * factor]
    return img.reshape(h2, factor, w2, factor, -1).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Scene directory: images/NNN.png + cameras.json
# ---------------------------------------------------------------------------

def _camera_to_record(cam: Camera) -> dict:
    return {
        "intrinsics": [float(x) for x in cam.intrinsics.reshape(-1)],
        "pose": [float(x) for x in cam.pose.reshape(-1)],
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def _camera_from_record(rec: dict) -> Camera:
    return Camera(
        intrinsics=np.array(rec["intrinsics"], dtype=np.float64).reshape(3, 3),
        pose=np.array(rec["pose"], dtype=np.float64).reshape(3, 4),
        width=int(rec["width"]),
        height=int(rec["height"]),
        near=float(rec["near"]),
        far=float(rec["far"]),
    )


def save_scene(bundle: SceneBundle, dir_path) -> None:
    dir_path = Path(dir_path)
    (dir_path / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for k, (img, cam) in enumerate(bundle.views):
        name = f"{k:03d}.png"
        save_png(img, dir_path / "images" / name)
        rec = _camera_to_record(cam)
        rec["image"] = f"images/{name}"
        records.append(rec)
    manifest = {"scene_id": bundle.scene_id, "views": records}
    (dir_path / "cameras.json").write_text(json.dumps(manifest, indent=1))


def load_scene(dir_path, downsample: int = 1) -> SceneBundle:
    """Load a scene directory written by :func:`save_scene`.

    View order follows the manifest.  ``downsample`` applies area averaging
    at load time and rescales the intrinsics to match.
    """
    dir_path = Path(dir_path)
    manifest_path = dir_path / "cameras.json"
    if not manifest_path.exists():
        raise FormatError(f"missing camera manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        records = manifest["views"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"unreadable camera manifest: {exc}") from exc

    image_files = sorted((dir_path / "images").glob("*.png"))
    if len(image_files) != len(records):
        raise ConsistencyError(
            f"manifest lists {len(records)} cameras but found "
            f"{len(image_files)} images on disk"
        )

    views = []
    for rec in records:
        try:
            cam = _camera_from_record(rec)
        except ValidationError:
            raise
        except Exception as exc:
            raise FormatError(f"bad camera record: {exc}") from exc
        img = load_png(dir_path / rec["image"])
        if downsample > 1:
            img = downsample_area(img, downsample)
            K = cam.intrinsics.copy()
            K[:2] /= downsample
            cam = replace(
                cam,
                intrinsics=K,
                width=img.shape[1],
                height=img.shape[0],
            )
        if img.shape[:2] != (cam.height, cam.width):
            raise ConsistencyError(
                f"image {rec['image']} is {img.shape[:2]}, camera says "
                f"{(cam.height, cam.width)}"
            )
        views.append((img, cam))
    return SceneBundle(views=tuple(views), scene_id=manifest.get("scene_id", dir_path.name))


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

_FLO_MAGIC = 202021.25


def write_flo(flow: FlowField, path) -> None:
    fl = np.ascontiguousarray(flow.flow, dtype="<f4")
    h, w = fl.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", _FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(fl.tobytes())


def read_flo(path, src_view: int = -1, dst_view: int = -1) -> FlowField:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise FormatError("truncated .flo header")
    (magic,) = struct.unpack_from("<f", data, 0)
    if magic != np.float32(_FLO_MAGIC):
        raise FormatError(f"bad .flo magic number: {magic!r}")
    w, h = struct.unpack_from("<ii", data, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad .flo dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FormatError("truncated .flo payload")
    fl = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12)
    return FlowField(flow=fl.reshape(h, w, 2).copy(), src_view=src_view, dst_view=dst_view)


# ---------------------------------------------------------------------------
# Style image folders
# ---------------------------------------------------------------------------

def load_style_set(dir_path) -> list:
    dir_path = Path(dir_path)
    paths = sorted(
        p for p in dir_path.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise ValidationError(f"no images found in {dir_path}")
    return [StyleImage(pixels=load_png(p), id=p.stem) for p in paths]


def split_styles(styles: list, ratio: float, seed: int):
    """Deterministic disjoint train/val split of a style list."""
    if not 0.0 < ratio <= 1.0:
        raise ValidationError("split ratio must be in (0, 1]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(styles))
    n_train = int(round(ratio * len(styles)))
    train = [styles[i] for i in order[:n_train]]
    val = [styles[i] for i in order[n_train:]]
    if not val:
        warnings.warn("style split produced an empty validation set")
    return train, val


def synth_styles(n: int, seed: int, size: int = 32) -> list:
    """Procedural colorful style images for desk-scale experiments."""
    if n < 1:
        raise ValidationError("need at least one style image")
    rng = np.random.default_rng(seed)
    styles = []
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    for k in range(n):
        img = np.zeros((size, size, 3))
        for c in range(3):
            fx, fy = rng.uniform(1.0, 6.0, 2)
            px, py = rng.uniform(0, 2 * np.pi, 2)
            amp = rng.uniform(0.25, 0.5)
            base = rng.uniform(0.2, 0.8)
            img[..., c] = base + amp * np.sin(2 * np.pi * fx * xx + px) * np.cos(
                2 * np.pi * fy * yy + py
            )
        styles.append(StyleImage(pixels=np.clip(img, 0.0, 1.0), id=f"synth{k:03d}"))
    return styles


# ---------------------------------------------------------------------------
# Synthetic scenes: exact ray-cast rendering + analytic flow/mask oracles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a procedural textured scene with a camera ring."""

    geometry: str = "plane"        # "plane" or "box"
    texture_seed: int = 0
    n_views: int = 8
    radius: float = 4.0
    image_size: int = 64
    arc_degrees: float = 30.0
    plane_span: float = 12.0       # full world extent covered by the plane
    near: float = 1.0
    far: float = 8.0
    scene_id: str = "synth"


_TEX_GRID = 24
_FACE_TEX_GRID = 6
_BOX_CENTER = np.array([0.35, 0.05, -1.1])
_BOX_HALF = np.array([0.45, 0.45, 0.3])


def look_at_camera(eye, target, intrinsics, width, height, near, far) -> Camera:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-9:
        raise ValidationError("camera look-at target coincides with position")
    z = fwd / norm
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, z)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ eye
    pose = np.concatenate([R, t[:, None]], axis=1)
    return Camera(intrinsics=intrinsics, pose=pose, width=width, height=height,
                  near=near, far=far)


def _default_intrinsics(size: int) -> np.ndarray:
    f = 1.2 * size
    c = size / 2.0 - 0.5
    return np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])


def ring_cameras(spec: SynthSpec, n: int | None = None, arc_degrees: float | None = None):
    """Cameras on a horizontal arc in front of the scene, looking at origin."""
    n = spec.n_views if n is None else n
    arc = np.deg2rad(spec.arc_degrees if arc_degrees is None else arc_degrees)
    K = _default_intrinsics(spec.image_size)
    cams = []
    thetas = np.linspace(-arc / 2, arc / 2, n) if n > 1 else np.array([0.0])
    for th in thetas:
        eye = np.array([
            spec.radius * np.sin(th),
            0.35 * np.sin(2 * th),
            -spec.radius * np.cos(th),
        ])
        cams.append(look_at_camera(eye, [0.0, 0.0, 0.0], K, spec.image_size,
                                   spec.image_size, spec.near, spec.far))
    return cams


class SynthWorld:
    """Exact ray-cast geometry: a textured plane, optionally with a box."""

    def __init__(self, spec: SynthSpec):
        if spec.geometry not in ("plane", "box"):
            raise ValidationError(f"unknown geometry {spec.geometry!r}")
        self.spec = spec
        rng = np.random.default_rng(spec.texture_seed)
        # texture 0 is the plane; 1..6 are box faces (coarser so that the
        # projected texel size stays several pixels, keeping resampling
        # error well below the warp-oracle tolerance)
        self.textures = [rng.uniform(0.08, 1.0, size=(_TEX_GRID, _TEX_GRID, 3))]
        for _ in range(6):
            self.textures.append(
                rng.uniform(0.08, 1.0, size=(_FACE_TEX_GRID, _FACE_TEX_GRID, 3))
            )

    # -- intersection ------------------------------------------------------
    def _intersect(self, origins, dirs):
        """Nearest hit for a batch of rays.

        Returns (t, tex_id, u, v) arrays; rays are guaranteed to hit the
        backdrop plane as long as cameras face it.
        """
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        tex_id = np.zeros(n, dtype=np.int64)
        uu = np.zeros(n)
        vv = np.zeros(n)

        # plane z = 0
        dz = dirs[:, 2]
        valid = np.abs(dz) > 1e-12
        t = np.where(valid, -origins[:, 2] / np.where(valid, dz, 1.0), np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        hit = origins + t[:, None] * dirs
        span = self.spec.plane_span
        u = hit[:, 0] / span + 0.5
        v = hit[:, 1] / span + 0.5
        better = t < best_t
        best_t = np.where(better, t, best_t)
        uu = np.where(better, u, uu)
        vv = np.where(better, v, vv)

        if self.spec.geometry == "box":
            lo = _BOX_CENTER - _BOX_HALF
            hi = _BOX_CENTER + _BOX_HALF
            safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
            t1 = (lo[None, :] - origins) / safe
            t2 = (hi[None, :] - origins) / safe
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            tnear = tmin.max(axis=1)
            tfar = tmax.min(axis=1)
            axis = tmin.argmax(axis=1)
            bhit = (tnear < tfar) & (tnear > 1e-6)
            tb = np.where(bhit, tnear, np.inf)
            p = origins + tb[:, None] * dirs
            local = (p - _BOX_CENTER[None, :]) / _BOX_HALF[None, :]
            sign_neg = np.take_along_axis(dirs, axis[:, None], axis=1)[:, 0] > 0
            face = axis * 2 + sign_neg.astype(np.int64)  # 0..5
            ax_u = (axis + 1) % 3
            ax_v = (axis + 2) % 3
            bu = 0.5 * (np.take_along_axis(local, ax_u[:, None], axis=1)[:, 0] + 1)
            bv = 0.5 * (np.take_along_axis(local, ax_v[:, None], axis=1)[:, 0] + 1)
            better = tb < best_t
            best_t = np.where(better, tb, best_t)
            tex_id = np.where(better, face + 1, tex_id)
            uu = np.where(better, bu, uu)
            vv = np.where(better, bv, vv)

        return best_t, tex_id, uu, vv

    def _sample_texture(self, tex_id, u, v):
        out = np.zeros((len(u), 3))
        for tid in np.unique(tex_id):
            sel = tex_id == tid
            tex = self.textures[tid]
            g = tex.shape[0] - 1
            x = np.clip(u[sel], 0.0, 1.0) * g
            y = np.clip(v[sel], 0.0, 1.0) * g
            x0 = np.clip(np.floor(x).astype(np.int64), 0, g - 1)
            y0 = np.clip(np.floor(y).astype(np.int64), 0, g - 1)
            fx = x - x0
            fy = y - y0
            out[sel] = (
                tex[y0, x0] * ((1 - fx) * (1 - fy))[:, None]
                + tex[y0, x0 + 1] * (fx * (1 - fy))[:, None]
                + tex[y0 + 1, x0] * ((1 - fx) * fy)[:, None]
                + tex[y0 + 1, x0 + 1] * (fx * fy)[:, None]
            )
        return out

    # -- rendering ---------------------------------------------------------
    def cast(self, cam: Camera):
        """Render one view; returns (image, depth map, 3D hit points)."""
        h, w = cam.height, cam.width
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        d_cam = np.stack([
            (pix[:, 0] - cam.cx) / cam.fx,
            (pix[:, 1] - cam.cy) / cam.fy,
            np.ones(len(pix)),
        ], axis=1)
        d_world = d_cam @ cam.rotation  # R.T @ d for each row
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(cam.center, d_world.shape)

        t, tex_id, u, v = self._intersect(origins, d_world)
        points = origins + t[:, None] * d_world
        colors = self._sample_texture(tex_id, u, v)
        cam_pts = points @ cam.rotation.T + cam.translation
        depth = cam_pts[:, 2]
        image = colors.reshape(h, w, 3)
        return image, depth.reshape(h, w), points.reshape(h, w, 3)

    def exact_flow(self, cam_j: Camera, cam_i: Camera):
        """Ground-truth flow/mask for warping view j into view i's frame."""
        _, _, points_i = self.cast(cam_i)
        _, depth_j, _ = self.cast(cam_j)
        h, w = cam_i.height, cam_i.width
        pts = points_i.reshape(-1, 3)
        cam_pts = pts @ cam_j.rotation.T + cam_j.translation
        z = cam_pts[:, 2]
        z_safe = np.where(np.abs(z) > 1e-9, z, 1e-9)
        qx = cam_j.fx * cam_pts[:, 0] / z_safe + cam_j.cx
        qy = cam_j.fy * cam_pts[:, 1] / z_safe + cam_j.cy
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        flow = np.stack([
            qx.reshape(h, w) - xs,
            qy.reshape(h, w) - ys,
        ], axis=2)

        in_bounds = (
            (qx >= 0) & (qx <= cam_j.width - 1) & (qy >= 0) & (qy <= cam_j.height - 1)
            & (z > 0)
        )
        # visibility: every bilinear-footprint neighbor in view j must see a
        # surface at a compatible depth, which also rejects edge blends
        visible = in_bounds.copy()
        x0 = np.clip(np.floor(qx).astype(np.int64), 0, cam_j.width - 2)
        y0 = np.clip(np.floor(qy).astype(np.int64), 0, cam_j.height - 2)
        eps = 0.05 + 0.01 * np.abs(z)
        for dx in (0, 1):
            for dy in (0, 1):
                zb = depth_j[np.clip(y0 + dy, 0, cam_j.height - 1),
                             np.clip(x0 + dx, 0, cam_j.width - 1)]
                visible &= np.abs(zb - z) <= eps
        return (
            FlowField(flow=flow.astype(np.float32)),
            VisibilityMask(mask=visible.reshape(h, w)),
        )


def synth_scene(spec: SynthSpec):
    """Build a synthetic scene plus exact flows and masks for all view pairs.

    Returns ``(bundle, flows, masks)`` where ``flows[(j, i)]`` warps view j
    into view i's frame (see the module docstring for the convention).
    Deterministic given ``spec.texture_seed``.
    """
    world = SynthWorld(spec)
    cams = ring_cameras(spec)
    views = []
    for cam in cams:
        img, _, _ = world.cast(cam)
        views.append((img, cam))
    bundle = SceneBundle(views=tuple(views), scene_id=spec.scene_id)

    flows = {}
    masks = {}
    for i in range(spec.n_views):
        for j in range(spec.n_views):
            if i == j:
                continue
            fl, mk = world.exact_flow(cams[j], cams[i])
            flows[(j, i)] = replace(fl, src_view=j, dst_view=i)
            masks[(j, i)] = mk
    return bundle, flows, masks
