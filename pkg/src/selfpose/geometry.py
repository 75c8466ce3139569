"""Rigid transforms, Euler-grid rotation distributions and grid shifting.

Quaternions are stored scalar-first ``(w, x, y, z)``. Euler angles follow the
intrinsic Z-Y-X convention used everywhere in this package::

    R = Rz(roll) @ Ry(yaw) @ Rx(pitch)

with pitch, roll in [-pi, pi) and yaw in [-pi/2, pi/2]. Grid axes are ordered
``(pitch, yaw, roll)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_GRID_DIMS = (16, 8, 16)


# --------------------------------------------------------------------------
# quaternion helpers (vectorized over leading axes)
# --------------------------------------------------------------------------

def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix (..., 3, 3) to unit quaternion with w >= 0."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, r in enumerate(flat):
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[n] = q if q[0] >= 0 else -q
    return out.reshape(m.shape[:-2] + (4,))


def axis_angle_to_quat(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half), rotvec * k], axis=-1)


def quat_to_axis_angle(q):
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return q[..., 1:] * k


def rotation_angle_between(qa, qb):
    """Geodesic angle (radians) between two rotations."""
    d = np.abs(np.sum(quat_normalize(qa) * quat_normalize(qb), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# --------------------------------------------------------------------------
# Euler angles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EulerAngles:
    pitch: float
    yaw: float
    roll: float

    def as_array(self):
        return np.array([self.pitch, self.yaw, self.roll])


def wrap_angle(a):
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def euler_to_quat(angles):
    """Euler ``(..., 3)`` ordered (pitch, yaw, roll) to quaternions."""
    angles = np.asarray(angles, dtype=float)
    phi, theta, psi = np.moveaxis(angles, -1, 0)
    zeros = np.zeros_like(phi)
    qx = np.stack([np.cos(phi / 2), np.sin(phi / 2), zeros, zeros], axis=-1)
    qy = np.stack([np.cos(theta / 2), zeros, np.sin(theta / 2), zeros], axis=-1)
    qz = np.stack([np.cos(psi / 2), zeros, zeros, np.sin(psi / 2)], axis=-1)
    return quat_multiply(quat_multiply(qz, qy), qx)


def matrix_to_euler(m):
    m = np.asarray(m, dtype=float)
    theta = np.arcsin(np.clip(-m[..., 2, 0], -1.0, 1.0))
    phi = np.arctan2(m[..., 2, 1], m[..., 2, 2])
    psi = np.arctan2(m[..., 1, 0], m[..., 0, 0])
    return np.stack([wrap_angle(phi), theta, wrap_angle(psi)], axis=-1)


def quat_to_euler(q):
    return matrix_to_euler(quat_to_matrix(q))


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``.

    Stored as a unit quaternion and a translation in meters. Instances are
    immutable; all operations return new poses.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if n == 0 or not np.isfinite(n):
            raise ValueError("rotation quaternion must be nonzero and finite")
        q = q / n
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_euler(cls, pitch, yaw, roll, translation=(0.0, 0.0, 0.0)):
        return cls(euler_to_quat([pitch, yaw, roll]), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(axis_angle_to_quat(rotvec), translation)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def euler(self):
        return quat_to_euler(self.rotation)

    def inverse(self):
        return invert(self)

    def __matmul__(self, other):
        return compose(self, other)

    def apply(self, points):
        return transform_point(self, points)

    def allclose(self, other, atol=1e-9):
        same_q = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(
            self.rotation, -other.rotation, atol=atol)
        return same_q and np.allclose(self.translation, other.translation, atol=atol)

    def __repr__(self):
        q = np.array2string(self.rotation, precision=5)
        t = np.array2string(self.translation, precision=5)
        return f"Pose(q={q}, t={t})"


MotionDelta = Pose


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.R @ b.translation + a.translation
    return Pose(q, t)


def invert(p: Pose) -> Pose:
    q = quat_conjugate(p.rotation)
    return Pose(q, -(quat_to_matrix(q) @ p.translation))


def transform_point(p: Pose, x):
    x = np.asarray(x, dtype=float)
    return x @ p.R.T + p.translation


def ray_rotation(points):
    """Minimal rotation taking the optical axis onto the ray through each point.

    ``points`` is ``(..., 3)`` in the camera frame. Returns ``(..., 3, 3)``.
    """
    p = np.asarray(points, dtype=float)
    d = p / np.linalg.norm(p, axis=-1, keepdims=True)
    # axis = z x d, cos = d_z
    axis = np.stack([-d[..., 1], d[..., 0], np.zeros_like(d[..., 0])], axis=-1)
    s = np.linalg.norm(axis, axis=-1)
    c = d[..., 2]
    ang = np.arctan2(s, c)
    unit = axis / np.where(s > 1e-12, s, 1.0)[..., None]
    return quat_to_matrix(axis_angle_to_quat(unit * ang[..., None]))


# --------------------------------------------------------------------------
# Rotation grid
# --------------------------------------------------------------------------

def bin_widths(dims):
    n_phi, n_theta, n_psi = dims
    return np.array([2.0 * np.pi / n_phi, np.pi / n_theta, 2.0 * np.pi / n_psi])


@lru_cache(maxsize=16)
def _cell_tables(dims):
    n_phi, n_theta, n_psi = dims
    w = bin_widths(dims)
    phi = -np.pi + (np.arange(n_phi) + 0.5) * w[0]
    theta = -np.pi / 2 + (np.arange(n_theta) + 0.5) * w[1]
    psi = -np.pi + (np.arange(n_psi) + 0.5) * w[2]
    grid = np.stack(np.meshgrid(phi, theta, psi, indexing="ij"), axis=-1)
    quats = euler_to_quat(grid)
    mats = quat_to_matrix(quats)
    for arr in (grid, quats, mats):
        arr.setflags(write=False)
    return grid, quats, mats


def cell_euler(dims):
    """Cell-center Euler angles, shape ``dims + (3,)``."""
    return _cell_tables(tuple(dims))[0]


def cell_quaternions(dims):
    return _cell_tables(tuple(dims))[1]


def cell_matrices(dims):
    return _cell_tables(tuple(dims))[2]


def euler_to_cell(angles, dims):
    """Index of the cell containing each Euler triple (nearest center)."""
    a = np.asarray(angles, dtype=float)
    w = bin_widths(dims)
    i = np.floor((wrap_angle(a[..., 0]) + np.pi) / w[0]).astype(int) % dims[0]
    j = np.clip(np.floor((a[..., 1] + np.pi / 2) / w[1]).astype(int), 0, dims[1] - 1)
    k = np.floor((wrap_angle(a[..., 2]) + np.pi) / w[2]).astype(int) % dims[2]
    return i, j, k


def rotation_to_cell(q, dims):
    """Flat cell index for a quaternion."""
    i, j, k = euler_to_cell(quat_to_euler(q), dims)
    return int(np.ravel_multi_index((i, j, k), dims))


@dataclass(frozen=True, eq=False)
class RotationGrid:
    """Discrete distribution over SO(3) on a (pitch, yaw, roll) Euler grid."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 3:
            raise ValueError("weights must be a 3-D array (n_pitch, n_yaw, n_roll)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def dims(self):
        return tuple(self.weights.shape)

    @property
    def total(self):
        return float(self.weights.sum())

    @classmethod
    def uniform(cls, dims=DEFAULT_GRID_DIMS):
        n = int(np.prod(dims))
        return cls(np.full(tuple(dims), 1.0 / n))

    @classmethod
    def delta(cls, cell, dims=DEFAULT_GRID_DIMS):
        w = np.zeros(tuple(dims))
        w[tuple(cell) if not np.isscalar(cell) else np.unravel_index(cell, dims)] = 1.0
        return cls(w)

    def normalized(self):
        s = self.weights.sum()
        if s <= 0:
            raise ValueError("degenerate distribution")
        return RotationGrid(self.weights / s)

    def mode(self):
        return np.unravel_index(int(np.argmax(self.weights)), self.dims)


def _wrap_shift_matrix(n, shift_bins):
    """Push-forward matrix ``T[target, source]`` for a circular fractional shift."""
    k = int(np.floor(shift_bins))
    f = shift_bins - k
    src = np.arange(n)
    T = np.zeros((n, n))
    np.add.at(T, ((src + k) % n, src), 1.0 - f)
    np.add.at(T, ((src + k + 1) % n, src), f)
    return T


def _clamp_shift_matrix(n, shift_bins):
    """Like ``_wrap_shift_matrix`` but mass leaving the axis folds into the ends."""
    k = int(np.floor(shift_bins))
    f = shift_bins - k
    src = np.arange(n)
    T = np.zeros((n, n))
    np.add.at(T, (np.clip(src + k, 0, n - 1), src), 1.0 - f)
    np.add.at(T, (np.clip(src + k + 1, 0, n - 1), src), f)
    return T


def _gauss_matrix(n, sigma_bins, wrap):
    if sigma_bins <= 0:
        return np.eye(n)
    half = int(np.ceil(4 * sigma_bins))
    offs = np.arange(-half, half + 1)
    ker = np.exp(-0.5 * (offs / sigma_bins) ** 2)
    ker /= ker.sum()
    src = np.arange(n)
    T = np.zeros((n, n))
    for o, kv in zip(offs, ker):
        tgt = (src + o) % n if wrap else np.clip(src + o, 0, n - 1)
        np.add.at(T, (tgt, src), kv)
    return T


def grid_transfer_matrices(dims, delta_euler, blur_sigma=(0.0, 0.0, 0.0)):
    """Per-axis push-forward matrices for a shift (radians) followed by blur.

    Applying the three matrices along their axes is exactly trilinear
    relocation across the 8 neighbouring cells (the tensor product of the
    per-axis linear splits).
    """
    w = bin_widths(dims)
    d = np.asarray(delta_euler, dtype=float) / w
    s = np.asarray(blur_sigma, dtype=float) / w if np.ndim(blur_sigma) else np.full(3, blur_sigma) / w
    mats = []
    for axis in range(3):
        wrap = axis != 1
        shift = _wrap_shift_matrix if wrap else _clamp_shift_matrix
        T = shift(dims[axis], d[axis])
        if s[axis] > 0:
            T = _gauss_matrix(dims[axis], s[axis], wrap) @ T
        mats.append(T)
    return mats


def apply_transfer(weights, mats):
    """Apply per-axis transfer matrices to ``(..., n0, n1, n2)`` weights.

    ``mats`` entries are ``(n, n)`` or batched ``(B, n, n)``.
    """
    A, B, C = mats
    if A.ndim == 2:
        out = np.einsum("ai,...ijk->...ajk", A, weights)
        out = np.einsum("bj,...ajk->...abk", B, out)
        return np.einsum("ck,...abk->...abc", C, out)
    n, n0, n1, n2 = weights.shape
    # batched matmuls, one axis at a time
    out = (A @ weights.reshape(n, n0, n1 * n2)).reshape(n, n0, n1, n2)
    out = (B @ out.transpose(0, 2, 1, 3).reshape(n, n1, n0 * n2)).reshape(n, n1, n0, n2).transpose(0, 2, 1, 3)
    out = out.reshape(n, n0 * n1, n2) @ C.transpose(0, 2, 1)
    return out.reshape(n, n0, n1, n2)


def _as_euler_delta(d):
    if isinstance(d, Pose):
        return quat_to_euler(d.rotation)
    if isinstance(d, EulerAngles):
        return d.as_array()
    return np.asarray(d, dtype=float).reshape(3)


def shift_rotation_grid(g: RotationGrid, d, normalize=True) -> RotationGrid:
    """Relocate grid mass by the Euler decomposition of ``d``.

    ``d`` is a Pose/MotionDelta (its rotation is decomposed into
    (dpitch, dyaw, droll)) or an Euler triple in radians. Mass of every cell
    moves to the shifted continuous location and is split trilinearly across
    the 8 surrounding cells; pitch and roll wrap, yaw folds at the poles.
    """
    total = g.weights.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"rotation grid is not normalized (sum={total:.9g})")
    mats = grid_transfer_matrices(g.dims, _as_euler_delta(d))
    out = apply_transfer(g.weights, mats)
    if normalize:
        out = out / out.sum()
    return RotationGrid(out)


def grid_expectation(g: RotationGrid):
    """Weighted quaternion mean over the 3x3x3 neighbourhood of the mode."""
    w = g.weights
    if w.sum() <= 0:
        raise ValueError("degenerate distribution")
    return neighborhood_mean(w, g.dims)


def neighborhood_mean(w, dims):
    i, j, k = np.unravel_index(int(np.argmax(w)), dims)
    ii = (i + np.arange(-1, 2)) % dims[0]
    jj = np.unique(np.clip(j + np.arange(-1, 2), 0, dims[1] - 1))
    kk = (k + np.arange(-1, 2)) % dims[2]
    if dims[0] < 3:
        ii = np.unique(ii)
    if dims[2] < 3:
        kk = np.unique(kk)
    idx = np.ix_(ii, jj, kk)
    q = cell_quaternions(dims)[idx].reshape(-1, 4)
    ww = w[idx].reshape(-1)
    ref = cell_quaternions(dims)[i, j, k]
    sign = np.where(q @ ref < 0, -1.0, 1.0)
    mean = (ww * sign) @ q
    return mean / np.linalg.norm(mean)


def grid_kl(p: RotationGrid, q: RotationGrid, eps=1e-300):
    a = p.weights.ravel()
    b = q.weights.ravel()
    m = a > 0
    return float(np.sum(a[m] * (np.log(a[m]) - np.log(np.maximum(b[m], eps)))))
