"""Rao-Blackwellized particle filter over object pose.

Each particle carries a translation hypothesis ``(u, v, z)`` (object center
pixel and camera-frame depth) and a full discrete rotation distribution. The
rotation grids are allocentric: they describe the object's rotation relative
to the viewing ray through ``(u, v)``, which is what an on-axis template
codebook measures. :func:`estimate` converts back to the camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels
from .encoder import CODE_GRID, DEPTH_GRID, Codebook, encode_pooled
from .geometry import (DEFAULT_GRID_DIMS, Pose, apply_transfer, bin_widths, matrix_to_euler,
                       matrix_to_quat, neighborhood_mean, quat_to_matrix, ray_rotation, _gauss_matrix)
from .render import BACKGROUND, ROI_SIZE, CameraIntrinsics, nearest_sample, roi_sample_coords, roi_side

MIN_Z = 0.05


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 100
    sigma_u: float = 20.0        # px
    sigma_v: float = 20.0        # px
    sigma_z: float = 0.1         # m, half-range of the uniform depth proposal
    k_steps: int = 50
    sigma_t: float = 0.015       # m, translation process noise
    sigma_r: float = 0.05        # rad, rotation process noise
    beta: float = 40.0
    sigma_d: float = 0.01        # m, depth likelihood
    depth_outlier: float = 3.0   # residual clip, in units of sigma_d
    depth_correlation: float = 4.0  # template samples per independent depth measurement
    weight_mode: str = "max"     # "max" (mode likelihood) or "sum" (marginal)
    init_sigma_t: float = 0.003  # m, final jitter between same-image filtering steps
    init_anneal_t: float = 0.01  # m, first-step jitter, decayed geometrically to init_sigma_t
    init_sigma_r: float = 0.0
    init_temper: float = 0.1     # first-step likelihood exponent, raised geometrically to 1
    rot_blur_floor: float = 0.5  # bins of extra rotation diffusion per propagation
    depth_search_radius: int = 10
    resample_fraction: float = 0.5

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        for name in ("sigma_u", "sigma_v", "sigma_z", "sigma_t", "sigma_r", "sigma_d", "beta",
                     "init_sigma_t", "init_anneal_t", "init_sigma_r", "rot_blur_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        if self.weight_mode not in ("max", "sum"):
            raise ValueError("weight_mode must be 'max' or 'sum'")


@dataclass(frozen=True, eq=False)
class Particle:
    u: float
    v: float
    z: float
    rotation: np.ndarray
    weight: float


@dataclass(frozen=True, eq=False)
class ParticleSet:
    uvz: np.ndarray      # (N, 3)
    grids: np.ndarray    # (N, n_phi, n_theta, n_psi), each normalized
    weights: np.ndarray  # (N,), normalized
    object_id: int = 0
    flags: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.weights)

    @property
    def dims(self):
        return tuple(self.grids.shape[1:])

    @property
    def needs_reinit(self):
        return "reinit" in self.flags

    @property
    def ess(self):
        return float(1.0 / np.sum(self.weights ** 2))

    def __getitem__(self, i):
        u, v, z = self.uvz[i]
        return Particle(float(u), float(v), float(z), self.grids[i], float(self.weights[i]))

    def positions(self, K: CameraIntrinsics):
        return K.unproject(self.uvz[:, 0], self.uvz[:, 1], self.uvz[:, 2])


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _uniform_grids(n, dims):
    return np.full((n,) + tuple(dims), 1.0 / np.prod(dims))


def nearest_valid_depth(D, radius):
    """Per-pixel depth of the nearest valid pixel and the distance to it."""
    D = np.asarray(D, dtype=float)
    invalid = ~(D > 0)
    if invalid.all():
        return np.zeros_like(D), np.full(D.shape, np.inf)
    dist, (iv, iu) = ndimage.distance_transform_edt(invalid, return_indices=True)
    return D[iv, iu], dist


def init_particles(center, D, cfg: FilterConfig, seed=0, K: CameraIntrinsics | None = None,
                   dims=DEFAULT_GRID_DIMS, object_id=0) -> ParticleSet:
    """Sample translations around a detected center; rotations uniform."""
    rng = _rng(seed)
    D = np.asarray(D, dtype=float)
    H, W = D.shape
    filled, dist = nearest_valid_depth(D, cfg.depth_search_radius)
    cu, cv = int(round(center[0])), int(round(center[1]))
    cu, cv = min(max(cu, 0), W - 1), min(max(cv, 0), H - 1)
    if dist[cv, cu] > cfg.depth_search_radius:
        raise FilterError("depth hole at detection")
    fallback = filled[cv, cu]
    n = cfg.n_particles
    u = center[0] + cfg.sigma_u * rng.standard_normal(n)
    v = center[1] + cfg.sigma_v * rng.standard_normal(n)
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    iu, iv = np.round(u).astype(int), np.round(v).astype(int)
    d = np.where(dist[iv, iu] <= cfg.depth_search_radius, filled[iv, iu], fallback)
    z = rng.uniform(d - cfg.sigma_z, d + cfg.sigma_z)
    z = np.maximum(z, MIN_Z)
    return ParticleSet(np.column_stack([u, v, z]), _uniform_grids(n, dims), np.full(n, 1.0 / n), object_id)


def global_init(rgb, D, K: CameraIntrinsics, cfg: FilterConfig, seed=0, dims=DEFAULT_GRID_DIMS,
                object_id=0) -> ParticleSet:
    """Translations uniform over valid-depth pixels; rotations uniform."""
    rng = _rng(seed)
    D = np.asarray(D, dtype=float)
    vv, uu = np.nonzero(D > 0)
    if len(uu) == 0:
        raise FilterError("no valid depth in image")
    n = cfg.n_particles
    pick = rng.integers(0, len(uu), size=n)
    u, v = uu[pick].astype(float), vv[pick].astype(float)
    d = D[vv[pick], uu[pick]]
    z = np.maximum(rng.uniform(d - cfg.sigma_z, d + cfg.sigma_z), MIN_Z)
    return ParticleSet(np.column_stack([u, v, z]), _uniform_grids(n, dims), np.full(n, 1.0 / n), object_id)


def systematic_resample(weights, rng):
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


def _depth_loglik(ps_uvz, cells, book: Codebook, D, own, sides, cfg: FilterConfig):
    """Robust depth-template log likelihood per particle.

    The template of the particle's most likely rotation cell predicts surface
    depths ``z + offset`` on a 16x16 RoI lattice. Samples on the object's
    own observed pixels contribute clipped squared residuals; template
    samples that see no depth, or see something behind the predicted
    surface, count as outliers; samples hidden behind another object are
    skipped.
    """
    us, vs = roi_sample_coords(ps_uvz[:, :2], sides, DEPTH_GRID)
    obs = nearest_sample(D, us, vs, 0.0)
    mine = nearest_sample(own, us, vs, False).astype(bool)
    off = book.depth_offsets[cells]
    on_template = np.isfinite(off)
    pred = ps_uvz[:, 2, None, None] + np.where(on_template, off, 0.0)
    tau = cfg.depth_outlier * cfg.sigma_d
    resid = np.minimum(np.abs(obs - pred), tau)
    occluded = (obs > 0) & ~mine & (obs < pred - tau)
    r2 = np.where(on_template & mine, resid ** 2, 0.0)
    r2 = np.where(on_template & ~mine & ~occluded, tau ** 2, r2)
    # own surface where the hypothesis has none
    r2 = np.where(~on_template & mine, tau ** 2, r2)
    return -r2.sum(axis=(1, 2)) / (2.0 * cfg.sigma_d ** 2 * cfg.depth_correlation)


def update(ps: ParticleSet, rgb, D, K: CameraIntrinsics, book: Codebook, cfg: FilterConfig,
           mask=None, seed=0, temper=1.0) -> ParticleSet:
    """One observation update with resampling when the ESS drops below N/2.

    ``mask`` (boolean image) restricts the observation to the object's
    predicted segment: other pixels are painted background before encoding
    and treated as foreign by the depth likelihood. ``temper`` in (0, 1]
    flattens the likelihood (annealing).
    """
    rng = _rng(seed)
    rgb = np.asarray(rgb, dtype=float)
    D = np.asarray(D, dtype=float)
    if mask is not None:
        own = np.asarray(mask, dtype=bool) & (D > 0)
        rgb = np.where(own[..., None], rgb, BACKGROUND)
    else:
        own = D > 0

    uvz = ps.uvz
    sides = roi_side(np.maximum(uvz[:, 2], MIN_Z), book.diameter, K)
    pooled = _kernels.crop_pooled(np.ascontiguousarray(rgb), np.ascontiguousarray(uvz[:, :2]), sides, ROI_SIZE,
                                  ROI_SIZE // CODE_GRID, BACKGROUND.copy())
    codes, valid = encode_pooled(pooled)

    sims = book.similarities(codes)  # (N, cells)
    loglik = temper * cfg.beta * (np.maximum(sims, 0.0) - 1.0)
    lik = np.exp(loglik)
    lik[~valid] = 1.0
    prior = ps.grids.reshape(len(ps), -1)
    post = prior * lik
    mass = post.sum(axis=1)
    post = np.where(mass[:, None] > 0, post / np.where(mass > 0, mass, 1.0)[:, None], prior)

    if cfg.weight_mode == "max":
        log_color = loglik.max(axis=1)
    else:
        log_color = np.log(np.maximum(mass, 1e-300))
    log_color = np.where(valid, log_color, -np.inf)

    cells = np.argmax(post, axis=1)
    log_depth = temper * _depth_loglik(uvz, cells, book, D, own, sides, cfg)

    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + log_color + log_depth
    flags = set(ps.flags) - {"reinit"}
    if not np.any(np.isfinite(logw)):
        flags.add("reinit")
        return ParticleSet(uvz, post.reshape(ps.grids.shape), np.full(len(ps), 1.0 / len(ps)),
                           ps.object_id, frozenset(flags))
    w = np.exp(logw - logw[np.isfinite(logw)].max())
    w = np.where(np.isfinite(logw), w, 0.0)
    w /= w.sum()
    grids = post.reshape(ps.grids.shape)
    ess = 1.0 / np.sum(w ** 2)
    if ess < cfg.resample_fraction * len(w):
        idx = systematic_resample(w, rng)
        uvz, grids, w = uvz[idx], grids[idx], np.full(len(w), 1.0 / len(w))
    return ParticleSet(uvz.copy(), grids.copy(), w, ps.object_id, frozenset(flags))


def _batched_shift_matrices(n, shifts, wrap):
    """``(B, n, n)`` push-forward matrices for per-particle fractional shifts (bins)."""
    B = len(shifts)
    k = np.floor(shifts).astype(int)
    f = shifts - k
    src = np.arange(n)
    T = np.zeros((B, n, n))
    b = np.repeat(np.arange(B), n)
    s = np.tile(src, B)
    for add, wgt in ((0, 1.0 - f), (1, f)):
        tgt = (src[None, :] + k[:, None] + add)
        tgt = tgt % n if wrap else np.clip(tgt, 0, n - 1)
        np.add.at(T, (b, tgt.ravel(), s), np.repeat(wgt, n))
    return T


def propagate(ps: ParticleSet, delta: Pose, K: CameraIntrinsics, cfg: FilterConfig, seed=0,
              sigma_t=None, sigma_r=None) -> ParticleSet:
    """Motion-prior prediction for a camera motion ``delta``.

    ``delta`` maps points from the previous camera frame into the current one.
    Translations move as ``dR x + dt + N(0, sigma_t)``; every rotation grid is
    shifted by the Euler decomposition of the (allocentric) rotation change and
    diffused by a Gaussian of width ``sigma_r``.
    """
    rng = _rng(seed)
    sigma_t = cfg.sigma_t if sigma_t is None else sigma_t
    sigma_r = cfg.sigma_r if sigma_r is None else sigma_r
    x = ps.positions(K)
    dR = delta.R
    x_new = x @ dR.T + delta.translation
    if sigma_t > 0:
        x_new = x_new + sigma_t * rng.standard_normal(x_new.shape)
    z = x_new[:, 2]
    flags = set(ps.flags)
    if np.any(z < MIN_Z):
        flags.add("frustum")
        z = np.maximum(z, MIN_Z)
    u = K.fx * x_new[:, 0] / z + K.cx
    v = K.fy * x_new[:, 1] / z + K.cy
    uc = np.clip(u, 0, K.width - 1)
    vc = np.clip(v, 0, K.height - 1)
    if np.any(uc != u) or np.any(vc != v):
        flags.add("frustum")
    uvz = np.column_stack([uc, vc, z])

    x_after = K.unproject(uc, vc, z)
    Ra = ray_rotation(x_after)
    Rb = ray_rotation(x)
    D_alloc = np.einsum("nji,jk,nkl->nil", Ra, dR, Rb)
    widths = bin_widths(ps.dims)
    blur = np.sqrt((sigma_r / widths) ** 2 + cfg.rot_blur_floor ** 2) if (sigma_r > 0 or cfg.rot_blur_floor > 0) \
        else np.zeros(3)
    grids = _shift_grids(ps.grids, D_alloc, blur)
    return ParticleSet(uvz, grids, ps.weights.copy(), ps.object_id, frozenset(flags))


def _shift_grids(grids, D_alloc, blur=(0.0, 0.0, 0.0)):
    """Shift every grid by the Euler decomposition of its left rotation ``D_alloc`` (n, 3, 3)."""
    dims = grids.shape[1:]
    shifts = matrix_to_euler(D_alloc) / bin_widths(dims)
    mats = []
    for axis in range(3):
        wrap = axis != 1
        T = _batched_shift_matrices(dims[axis], shifts[:, axis], wrap)
        if blur[axis] > 0:
            T = _gauss_matrix(dims[axis], blur[axis], wrap) @ T
        mats.append(T)
    out = apply_transfer(grids, mats)
    return out / out.sum(axis=(1, 2, 3), keepdims=True)


def anchor(ps: ParticleSet, pose: Pose, K: CameraIntrinsics) -> ParticleSet:
    """Move the particle set rigidly so that its estimate lands on ``pose``.

    Used after a refined pose passes the gate: translations shift by the
    correction and every grid by the allocentric rotation change, so the
    spread of the set is kept while the estimate stops drifting.
    """
    est = estimate(ps, K)
    x = ps.positions(K) + (pose.translation - est.translation)
    z = np.maximum(x[:, 2], MIN_Z)
    uvz = np.column_stack([np.clip(K.fx * x[:, 0] / z + K.cx, 0, K.width - 1),
                           np.clip(K.fy * x[:, 1] / z + K.cy, 0, K.height - 1), z])
    C = ray_rotation(pose.translation).T @ pose.R @ est.R.T @ ray_rotation(est.translation)
    grids = _shift_grids(ps.grids, np.broadcast_to(C, (len(ps), 3, 3)))
    return ParticleSet(uvz, grids, ps.weights.copy(), ps.object_id, ps.flags)


def estimate(ps: ParticleSet, K: CameraIntrinsics) -> Pose:
    """Weighted-mean translation and the rotation expectation of the mean grid."""
    w = ps.weights
    if not np.isfinite(w).all() or w.sum() <= 0:
        raise FilterError("degenerate particle weights")
    t = w @ ps.positions(K)
    g = np.tensordot(w, ps.grids, axes=1)
    if g.sum() <= 0:
        raise FilterError("degenerate distribution")
    q_alloc = neighborhood_mean(g, ps.dims)
    R = ray_rotation(t) @ quat_to_matrix(q_alloc)
    return Pose(matrix_to_quat(R), t)


def allocentric_cell(pose: Pose, dims=DEFAULT_GRID_DIMS):
    """Flat rotation-grid cell of a camera-frame pose, relative to its viewing ray."""
    from .geometry import rotation_to_cell
    Ra = ray_rotation(pose.translation).T @ pose.R
    return rotation_to_cell(matrix_to_quat(Ra), dims)


def jitter_schedule(k, steps, cfg: FilterConfig):
    """Translation jitter before same-image step ``k``: geometric decay over the first half."""
    lo, hi = cfg.init_sigma_t, max(cfg.init_anneal_t, cfg.init_sigma_t)
    if lo <= 0 or hi == lo:
        return lo
    half = max(steps // 2, 1)
    return float(hi * (lo / hi) ** min(k / half, 1.0))


def temper_schedule(k, steps, cfg: FilterConfig):
    lo = cfg.init_temper
    if lo >= 1.0:
        return 1.0
    half = max(steps // 2, 1)
    return float(lo ** max(1.0 - k / half, 0.0))


def converge(ps: ParticleSet, rgb, D, K: CameraIntrinsics, book: Codebook, cfg: FilterConfig,
             steps=None, mask=None, seed=0) -> ParticleSet:
    """``steps`` filtering steps on one image (jittered static prediction + update)."""
    rng = _rng(seed)
    steps = cfg.k_steps if steps is None else steps
    still = Pose()
    for k in range(steps):
        if k > 0:
            sigma = jitter_schedule(k, steps, cfg)
            ps = propagate(ps, still, K, cfg, rng, sigma_t=sigma, sigma_r=cfg.init_sigma_r)
        ps = update(ps, rgb, D, K, book, cfg, mask=mask, seed=rng, temper=temper_schedule(k, steps, cfg))
        if ps.needs_reinit:
            break
    return ps
