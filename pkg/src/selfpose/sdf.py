"""Voxelized signed distance fields of closed meshes."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .mesh import TriangleMesh, check_watertight

_HEADER = struct.Struct("<3i4f")


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distance samples on a regular grid (negative inside).

    ``values[i, j, k]`` is the distance at ``origin + voxel_size * (i, j, k)``.
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        v = np.asarray(self.values, dtype=float)
        o.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self):
        return tuple(self.values.shape)

    @property
    def upper(self):
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)

    def point(self, i, j, k):
        return self.origin + self.voxel_size * np.array([i, j, k], dtype=float)

    def __call__(self, x):
        return sample_sdf(self, x)


def build_sdf(mesh: TriangleMesh, voxel_size: float | None = None, padding: int = 3) -> SdfGrid:
    """Exact unsigned distance per grid point, signed by 3-axis ray-parity vote."""
    check_watertight(mesh)
    if voxel_size is None:
        voxel_size = mesh.diameter / 64.0
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    padding = max(int(padding), 2)
    lo, hi = mesh.bounds()
    origin = lo - padding * voxel_size
    dims = tuple(int(n) for n in np.ceil((hi - lo) / voxel_size).astype(int) + 2 * padding + 1)
    tris = np.ascontiguousarray(mesh.corners, dtype=float)
    dist = _kernels.unsigned_distance_grid(tris, origin, float(voxel_size), *dims)

    votes = np.zeros(dims, dtype=np.int64)
    # irrational-ish offsets keep rays off edges and vertices of axis-aligned meshes
    jitter = np.array([0.1234567, 0.0765432]) * voxel_size * 1e-3
    for axis in range(3):
        counts = _kernels.parity_counts(tris, origin, float(voxel_size), np.array(dims), axis, jitter)
        labels = [(axis + 1) % 3, (axis + 2) % 3, axis]
        votes += (counts % 2).transpose([labels.index(d) for d in range(3)])
    sign = np.where(votes >= 2, -1.0, 1.0)
    return SdfGrid(origin, voxel_size, dist * sign)


def sample_sdf(g: SdfGrid, x, with_gradient=True):
    """Trilinear SDF value and its analytic gradient at point(s) ``x``.

    Points outside the grid are clamped onto its boundary and the distance
    to the boundary is added to the value (far-field). Returns
    ``(value, gradient)`` with shapes ``(...)`` and ``(..., 3)``, plus the
    far-field mask when called through :func:`sample_sdf_far`.
    """
    value, grad, _ = sample_sdf_far(g, x)
    return (value, grad) if with_gradient else value


def sample_sdf_far(g: SdfGrid, x):
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    p = x.reshape(-1, 3)
    h = g.voxel_size
    dims = np.array(g.dims)
    q = np.clip(p, g.origin, g.upper)
    off = p - q
    far_dist = np.linalg.norm(off, axis=1)
    far = far_dist > 0

    f = (q - g.origin) / h
    i0 = np.clip(np.floor(f).astype(int), 0, dims - 2)
    t = f - i0
    v = g.values
    i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
    c000 = v[i, j, k]
    c100 = v[i + 1, j, k]
    c010 = v[i, j + 1, k]
    c110 = v[i + 1, j + 1, k]
    c001 = v[i, j, k + 1]
    c101 = v[i + 1, j, k + 1]
    c011 = v[i, j + 1, k + 1]
    c111 = v[i + 1, j + 1, k + 1]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    c00 = c000 + (c100 - c000) * tx
    c10 = c010 + (c110 - c010) * tx
    c01 = c001 + (c101 - c001) * tx
    c11 = c011 + (c111 - c011) * tx
    c0 = c00 + (c10 - c00) * ty
    c1 = c01 + (c11 - c01) * ty
    val = c0 + (c1 - c0) * tz

    gz = (c1 - c0) / h
    gy = ((c10 - c00) * (1 - tz) + (c11 - c01) * tz) / h
    dx0 = (c100 - c000) * (1 - ty) + (c110 - c010) * ty
    dx1 = (c101 - c001) * (1 - ty) + (c111 - c011) * ty
    gx = (dx0 * (1 - tz) + dx1 * tz) / h
    grad = np.stack([gx, gy, gz], axis=1)

    if np.any(far):
        val = val + far_dist
        # clamped axes: the interior term is constant along them
        clamped = off != 0
        unit = np.zeros_like(off)
        unit[far] = off[far] / far_dist[far, None]
        grad = np.where(clamped, 0.0, grad) + unit
    return val.reshape(shape), grad.reshape(shape + (3,)), far.reshape(shape)


def sdf_to_bytes(g: SdfGrid) -> bytes:
    nx, ny, nz = g.dims
    header = _HEADER.pack(nx, ny, nz, g.voxel_size, *g.origin)
    return header + np.ascontiguousarray(g.values.transpose(2, 1, 0), dtype="<f4").tobytes()


def sdf_from_bytes(raw: bytes, source="sdf") -> SdfGrid:
    nx, ny, nz, h, ox, oy, oz = _HEADER.unpack_from(raw)
    vals = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if vals.size != nx * ny * nz:
        raise ValueError(f"{source}: expected {nx * ny * nz} values, found {vals.size}")
    values = vals.reshape(nz, ny, nx).transpose(2, 1, 0).astype(float)
    return SdfGrid(np.array([ox, oy, oz]), float(h), values)


def save_sdf(g: SdfGrid, path):
    Path(path).write_bytes(sdf_to_bytes(g))


def load_sdf(path) -> SdfGrid:
    return sdf_from_bytes(Path(path).read_bytes(), str(path))
