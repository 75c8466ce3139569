"""Template-codebook encoder standing in for a learned auto-encoder.

A RoI is described by a fixed-length code: 16x16 box-averaged colors with
per-channel means removed, L2-normalized. Each object gets a codebook with
one code per rotation-grid cell, rendered at a canonical distance. Filter
and evaluation code only touch :func:`encode`, :func:`rotation_likelihoods`
and :func:`cosine_similarity`, so a learned encoder can be dropped in.

Codebooks also carry a 16x16 depth template per cell (surface depth minus
the object-center depth, NaN off the object) which the filter uses for its
depth likelihood.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import DEFAULT_GRID_DIMS, Pose, RotationGrid, cell_quaternions
from .mesh import TriangleMesh
from .render import (BACKGROUND, DEFAULT_LIGHT, ROI_SIZE, CameraIntrinsics, crop_roi, nearest_sample,
                     render_object, roi_sample_coords)

CODE_GRID = 16
CODE_LENGTH = 3 * CODE_GRID * CODE_GRID
DEPTH_GRID = 16
DEFAULT_BETA = 40.0
_ZERO_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Code:
    vector: np.ndarray
    valid: bool = True

    @property
    def is_zero(self):
        return not self.valid


def encode_batch(images):
    """Codes for ``(N, 64, 64, 3)`` RoIs. Returns ``(codes, valid)``."""
    x = np.asarray(images, dtype=float)
    n, h, w, c = x.shape
    fh, fw = h // CODE_GRID, w // CODE_GRID
    return encode_pooled(x.reshape(n, CODE_GRID, fh, CODE_GRID, fw, c).mean(axis=(2, 4)))


def encode_pooled(x):
    """Codes from RoIs already box-averaged to ``(N, 16, 16, 3)``."""
    n = len(x)
    x = x - x.mean(axis=(1, 2), keepdims=True)
    v = x.transpose(0, 3, 1, 2).reshape(n, -1)
    norm = np.linalg.norm(v, axis=1)
    valid = norm > _ZERO_EPS
    v = np.where(valid[:, None], v / np.where(valid, norm, 1.0)[:, None], 0.0)
    return v, valid


def encode(roi) -> Code:
    img = roi.image if hasattr(roi, "image") else roi
    img = np.asarray(img, dtype=float)
    if img.shape != (ROI_SIZE, ROI_SIZE, 3):
        raise ValueError(f"expected a {ROI_SIZE}x{ROI_SIZE} RGB RoI, got {img.shape}")
    v, ok = encode_batch(img[None])
    return Code(v[0], bool(ok[0]))


def cosine_similarity(a, b) -> float:
    va = a.vector if isinstance(a, Code) else np.asarray(a, dtype=float)
    vb = b.vector if isinstance(b, Code) else np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na <= _ZERO_EPS or nb <= _ZERO_EPS:
        raise ValueError("cosine similarity of a zero code is undefined")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class Codebook:
    object_id: int
    dims: tuple
    z0: float
    diameter: float
    codes: np.ndarray          # (cells, CODE_LENGTH), unit rows
    depth_offsets: np.ndarray  # (cells, DEPTH_GRID, DEPTH_GRID), NaN off-object

    @property
    def n_cells(self):
        return len(self.codes)

    def similarities(self, codes):
        """Cosine similarity of ``(N, L)`` unit codes against every cell."""
        return np.asarray(codes, dtype=float) @ self.codes.T


def template_roi(mesh: TriangleMesh, rotation, K: CameraIntrinsics, z0, light=DEFAULT_LIGHT):
    """Render ``mesh`` at ``(0, 0, z0)`` with ``rotation`` and crop its RoI."""
    r = render_object(mesh, Pose(rotation, (0.0, 0.0, z0)), K, light)
    center = (K.cx, K.cy)
    roi = crop_roi(r.rgb, center, z0, mesh.diameter, K)
    us, vs = roi_sample_coords([center], [roi.side], DEPTH_GRID)
    d = nearest_sample(r.depth, us[0], vs[0], 0.0)
    offsets = np.where(d > 0, d - z0, np.nan)
    return roi, offsets


def build_codebook(mesh: TriangleMesh, K: CameraIntrinsics, dims=DEFAULT_GRID_DIMS, z0=0.5,
                   light=DEFAULT_LIGHT, object_id=0) -> Codebook:
    if z0 <= 0:
        raise ValueError("canonical distance must be positive")
    dims = tuple(int(d) for d in dims)
    quats = cell_quaternions(dims).reshape(-1, 4)
    images = np.empty((len(quats), ROI_SIZE, ROI_SIZE, 3))
    offsets = np.empty((len(quats), DEPTH_GRID, DEPTH_GRID))
    for c, q in enumerate(quats):
        roi, off = template_roi(mesh, q, K, z0, light)
        images[c] = roi.image
        offsets[c] = off
    codes, _ = encode_batch(images)
    return Codebook(int(object_id), dims, float(z0), float(mesh.diameter), codes, offsets)


def rotation_likelihoods(code, book: Codebook, beta=DEFAULT_BETA) -> RotationGrid:
    """Per-cell likelihood ``exp(beta * max(0, cos))``, normalized.

    A zero (all-background) code carries no information and yields the
    uniform grid.
    """
    v = code.vector if isinstance(code, Code) else np.asarray(code, dtype=float)
    if np.linalg.norm(v) <= _ZERO_EPS:
        return RotationGrid.uniform(book.dims)
    logw = beta * np.maximum(0.0, book.similarities(v[None])[0])
    w = np.exp(logw - logw.max())
    return RotationGrid((w / w.sum()).reshape(book.dims))


def adapt_codebook(book: Codebook, samples, alpha: float) -> Codebook:
    """Blend each sampled cell's code toward the mean of its observed codes.

    ``samples`` is an iterable of ``(roi_or_code, cell)`` where ``cell`` is a
    flat index or an ``(i, j, k)`` tuple. Zero codes are ignored.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    sums = {}
    for item, cell in samples:
        code = item if isinstance(item, Code) else encode(item)
        if not code.valid:
            continue
        idx = int(cell) if np.isscalar(cell) else int(np.ravel_multi_index(tuple(cell), book.dims))
        if not 0 <= idx < book.n_cells:
            raise ValueError(f"cell {cell} outside codebook")
        acc = sums.setdefault(idx, [np.zeros(book.codes.shape[1]), 0])
        acc[0] += code.vector
        acc[1] += 1
    if alpha == 0.0 or not sums:
        return book
    codes = book.codes.copy()
    for idx, (total, n) in sums.items():
        new = (1.0 - alpha) * codes[idx] + alpha * total / n
        norm = np.linalg.norm(new)
        if norm > _ZERO_EPS:
            codes[idx] = new / norm
    return replace(book, codes=codes)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

_BOOK_HEADER = struct.Struct("<4s5i2f")
_MAGIC = b"CBK1"


def codebook_to_bytes(book: Codebook) -> bytes:
    n_phi, n_theta, n_psi = book.dims
    header = _BOOK_HEADER.pack(_MAGIC, book.object_id, n_phi, n_theta, n_psi, book.codes.shape[1],
                               book.z0, book.diameter)
    body = np.ascontiguousarray(book.codes, dtype="<f4").tobytes()
    depth = np.ascontiguousarray(book.depth_offsets, dtype="<f4").tobytes()
    return header + body + depth


def codebook_from_bytes(raw: bytes, source="codebook") -> Codebook:
    magic, oid, a, b, c, length, z0, diam = _BOOK_HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{source}: not a codebook file")
    cells = a * b * c
    off = _BOOK_HEADER.size
    codes = np.frombuffer(raw, dtype="<f4", count=cells * length, offset=off).astype(float)
    off += cells * length * 4
    depth = np.frombuffer(raw, dtype="<f4", count=cells * DEPTH_GRID * DEPTH_GRID, offset=off).astype(float)
    return Codebook(oid, (a, b, c), float(z0), float(diam), codes.reshape(cells, length),
                    depth.reshape(cells, DEPTH_GRID, DEPTH_GRID))


def save_codebook(book: Codebook, path):
    Path(path).write_bytes(codebook_to_bytes(book))


def load_codebook(path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes(), str(path))


__all__ = ["BACKGROUND", "CODE_LENGTH", "Code", "Codebook", "adapt_codebook", "build_codebook",
           "codebook_from_bytes", "codebook_to_bytes", "cosine_similarity", "encode", "encode_batch", "encode_pooled", "load_codebook", "rotation_likelihoods",
           "save_codebook", "template_roi"]
