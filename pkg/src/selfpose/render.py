"""Pinhole RGB-D rendering by ray casting, back-projection and RoI cropping.

Image conventions: arrays are indexed ``[v, u]`` (row, column); pixel
``(u, v)`` looks along ``((u - cx) / fx, (v - cy) / fy, 1)``. Depth is the
camera-frame z coordinate, 0 where invalid. Camera frame: x right, y down,
z forward.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .geometry import Pose, compose, invert
from .mesh import TriangleMesh

BACKGROUND = np.array([0.3, 0.3, 0.3])
DEFAULT_LIGHT = np.array([0.25, -0.45, 1.0])  # direction light travels, camera frame
AMBIENT = 0.3
ROI_SIZE = 64
ROI_MARGIN = 1.4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 80.0
    cy: float = 60.0
    width: int = 160
    height: int = 120

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points):
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy, z], axis=-1)

    def unproject(self, u, v, z):
        u, v, z = (np.asarray(a, dtype=float) for a in (u, v, z))
        return np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], axis=-1)

    def scaled(self, factor):
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                                int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass(frozen=True, eq=False)
class RenderResult:
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    mask: np.ndarray   # (H, W) object id, 0 = background

    def __iter__(self):
        return iter((self.rgb, self.depth, self.mask))


def render(scene, cam: Pose, K: CameraIntrinsics, light=DEFAULT_LIGHT, ids=None,
           background=BACKGROUND, near=1e-3) -> RenderResult:
    """Render ``scene``, a sequence of ``(mesh, world_pose)``, from camera pose ``cam``.

    ``cam`` maps camera-frame points into the world frame. ``light`` is the
    direction the light travels, in the camera frame. Shading is flat
    Lambert on per-face albedo plus an ambient term.
    """
    scene = list(scene)
    if ids is None:
        ids = list(range(1, len(scene) + 1))
    H, W = K.height, K.width
    if not scene:
        rgb = np.broadcast_to(np.asarray(background, dtype=float), (H, W, 3)).copy()
        return RenderResult(rgb, np.zeros((H, W)), np.zeros((H, W), dtype=np.int32))

    world_to_cam = invert(cam)
    corners, colors, owner = [], [], []
    for oid, (mesh, pose) in zip(ids, scene):
        T = compose(world_to_cam, pose)
        corners.append(mesh.corners @ T.R.T + T.translation)
        colors.append(mesh.face_colors)
        owner.append(np.full(len(mesh.triangles), oid, dtype=np.int32))
    tris = np.ascontiguousarray(np.concatenate(corners))
    colors = np.concatenate(colors)
    owner = np.concatenate(owner)

    depth, index = _kernels.rasterize(tris, K.fx, K.fy, K.cx, K.cy, W, H, near)
    hit = index >= 0
    depth = np.where(hit, depth, 0.0)
    mask = np.where(hit, owner[np.maximum(index, 0)], 0).astype(np.int32)

    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-18)
    # orient normals towards the camera
    n *= np.where(np.sum(n * tris.mean(axis=1), axis=1) > 0, -1.0, 1.0)[:, None]
    ldir = np.asarray(light, dtype=float)
    ldir = ldir / np.linalg.norm(ldir)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(-(n @ ldir), 0.0, 1.0)
    face_rgb = np.clip(colors * shade[:, None], 0.0, 1.0)
    rgb = np.where(hit[..., None], face_rgb[np.maximum(index, 0)], np.asarray(background, dtype=float))
    return RenderResult(rgb, depth, mask)


def render_object(mesh: TriangleMesh, pose_in_camera: Pose, K: CameraIntrinsics, light=DEFAULT_LIGHT,
                  oid=1, background=BACKGROUND) -> RenderResult:
    """Render one object given directly in the camera frame."""
    return render([(mesh, pose_in_camera)], Pose(), K, light, ids=[oid], background=background)


def backproject(D, mask, K: CameraIntrinsics, return_dropped=False):
    """Camera-frame points ``D(u,v) K^-1 (u, v, 1)^T`` for every masked pixel.

    ``mask`` is a boolean image or an ``(n, 2)`` array of ``(u, v)`` pixels.
    Pixels without valid depth are skipped; ``return_dropped`` also returns
    how many were skipped.
    """
    D = np.asarray(D, dtype=float)
    m = np.asarray(mask)
    if m.ndim == 2 and m.shape == D.shape:
        v, u = np.nonzero(m)
    else:
        uv = m.reshape(-1, 2).astype(int)
        u, v = uv[:, 0], uv[:, 1]
    z = D[v, u]
    ok = z > 0
    pts = K.unproject(u[ok], v[ok], z[ok])
    return (pts, int(np.count_nonzero(~ok))) if return_dropped else pts


@dataclass(frozen=True, eq=False)
class RoI:
    image: np.ndarray
    center: tuple
    side: float
    outside: bool


def roi_side(z, diameter, K: CameraIntrinsics, margin=ROI_MARGIN):
    return margin * K.fx * diameter / np.asarray(z, dtype=float)


def roi_sample_coords(centers, sides, size):
    """Source pixel coordinates ``(N, size, size)`` for square crops."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    sides = np.atleast_1d(np.asarray(sides, dtype=float))
    offs = (np.arange(size) + 0.5) / size - 0.5
    us = centers[:, 0, None, None] + sides[:, None, None] * offs[None, None, :]
    vs = centers[:, 1, None, None] + sides[:, None, None] * offs[None, :, None]
    return us, vs


def bilinear_sample(img, us, vs, fill):
    """Bilinear lookup with out-of-bounds corners replaced by ``fill``."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    fill = np.broadcast_to(np.asarray(fill, dtype=float), (C,))
    u0 = np.floor(us).astype(int)
    v0 = np.floor(vs).astype(int)
    fu = (us - u0)[..., None]
    fv = (vs - v0)[..., None]
    out = 0.0
    for du, dv, wgt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                        (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        val = np.where(ok[..., None], img[np.clip(vv, 0, H - 1), np.clip(uu, 0, W - 1)], fill)
        out = out + wgt * val
    return out


def crop_batch(img, centers, sides, size=ROI_SIZE, fill=BACKGROUND):
    """Bilinear crops for many centers at once, ``(N, size, size, C)``."""
    img = np.asarray(img, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    fill = np.broadcast_to(np.asarray(fill, dtype=float), (img.shape[2],)).copy()
    out = _kernels.crop_bilinear(np.ascontiguousarray(img), np.atleast_2d(np.asarray(centers, dtype=float)),
                                 np.atleast_1d(np.asarray(sides, dtype=float)), int(size), fill)
    return out[..., 0] if squeeze else out


def nearest_sample(img, us, vs, fill=0.0):
    img = np.asarray(img)
    H, W = img.shape[:2]
    uu = np.floor(us + 0.5).astype(int)
    vv = np.floor(vs + 0.5).astype(int)
    ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
    val = img[np.clip(vv, 0, H - 1), np.clip(uu, 0, W - 1)]
    return np.where(ok if val.ndim == ok.ndim else ok[..., None], val, fill)


def crop_roi(img, center, z, diameter, K: CameraIntrinsics, size=ROI_SIZE, margin=ROI_MARGIN,
             fill=BACKGROUND) -> RoI:
    """Square crop of side ``margin * fx * diameter / z`` resampled to ``size``x``size``."""
    if z <= 0:
        raise ValueError("RoI depth must be positive")
    side = float(roi_side(z, diameter, K, margin))
    us, vs = roi_sample_coords([center], [side], size)
    patch = bilinear_sample(img, us[0], vs[0], fill)
    H, W = np.asarray(img).shape[:2]
    outside = bool(np.all((us < -1) | (us > W) | (vs < -1) | (vs > H)))
    if np.asarray(img).ndim == 2:
        patch = patch[..., 0]
    return RoI(patch, (float(center[0]), float(center[1])), side, outside)


# --------------------------------------------------------------------------
# PNG persistence
# --------------------------------------------------------------------------

def save_rgb_png(rgb, path):
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def load_rgb_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0


def save_depth_png(depth, path):
    mm = np.round(np.clip(np.asarray(depth) * 1000.0, 0, 65535)).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path):
    return np.asarray(Image.open(path), dtype=float) / 1000.0


def save_mask_png(mask, path):
    Image.fromarray(np.asarray(mask).astype(np.uint8), "L").save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path), dtype=np.int32)


def save_frame(out_dir, stem, rgb, depth, mask):
    out_dir = Path(out_dir)
    paths = {"rgb": out_dir / f"{stem}_rgb.png", "depth": out_dir / f"{stem}_depth.png",
             "mask": out_dir / f"{stem}_mask.png"}
    save_rgb_png(rgb, paths["rgb"])
    save_depth_png(depth, paths["depth"])
    save_mask_png(mask, paths["mask"])
    return paths
