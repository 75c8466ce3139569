"""Segmentation masks and SDF-based pose refinement.

The refinement aligns a back-projected object point cloud with the object's
signed distance field by minimizing

    f(t, R) = mean_i |SDF(R^T (p_i - t))| + lam/2 * ||t - t_bar||^2

with steepest descent and Armijo backtracking. Translation steps are
additive; rotation steps are left tangent increments ``R <- exp(w) R``
about the object origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, axis_angle_to_quat, matrix_to_quat, quat_multiply, quat_to_matrix
from .sdf import SdfGrid, sample_sdf

MIN_SUPPORT = 10


@dataclass(frozen=True)
class RefineConfig:
    margin: float = 0.02      # m, visibility margin
    lam: float = 0.001        # translation regularizer on the mean objective
    max_iters: int = 300
    step_tol: float = 1e-5    # m, stop once a step moves points less than this
    armijo: float = 1e-4
    init_step: float = 0.01   # m

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.max_iters < 0 or self.step_tol <= 0 or self.init_step <= 0:
            raise ValueError("max_iters, step_tol and init_step must be positive")


@dataclass(frozen=True, eq=False)
class RefineResult:
    pose: Pose
    objective: float
    iterations: int
    history: list = field(default_factory=list)   # objective after every accepted step
    flags: frozenset = field(default_factory=frozenset)

    @property
    def insufficient_support(self):
        return "insufficient support" in self.flags


def visibility_mask(D, D_render, margin):
    """Pixels where observed and rendered depth are both valid and agree within ``margin``."""
    D = np.asarray(D, dtype=float)
    Dr = np.asarray(D_render, dtype=float)
    if D.shape != Dr.shape:
        raise ValueError(f"resolution mismatch: {D.shape} vs {Dr.shape}")
    return (D > 0) & (Dr > 0) & (np.abs(D - Dr) < margin)


def object_mask(predicted, rendered, visible):
    """Pixelwise intersection of predicted, rendered and visibility masks."""
    predicted, rendered, visible = (np.asarray(m, dtype=bool) for m in (predicted, rendered, visible))
    if not predicted.shape == rendered.shape == visible.shape:
        raise ValueError("mask resolution mismatch")
    return predicted & rendered & visible


class _Objective:
    def __init__(self, points, sdf: SdfGrid, t_bar, lam):
        self.p = np.asarray(points, dtype=float).reshape(-1, 3)
        self.sdf = sdf
        self.t_bar = np.asarray(t_bar, dtype=float)
        self.lam = float(lam)
        self.band = sdf.voxel_size / 4.0

    def value(self, t, R):
        s = sample_sdf(self.sdf, (self.p - t) @ R, with_gradient=False)
        d = t - self.t_bar
        return float(np.mean(np.abs(s)) + 0.5 * self.lam * d @ d)

    def value_and_grad(self, t, R, band=True):
        q = self.p - t
        s, g = sample_sdf(self.sdf, q @ R)
        sign = np.sign(s)
        if band:
            sign = np.where(np.abs(s) < self.band, 0.0, sign)
        gw = g @ R.T                      # world-frame SDF gradient
        d = t - self.t_bar
        f = float(np.mean(np.abs(s)) + 0.5 * self.lam * d @ d)
        g_t = -(sign[:, None] * gw).mean(axis=0) + self.lam * d
        g_w = -(sign[:, None] * np.cross(q, gw)).mean(axis=0)
        return f, g_t, g_w


def _rotate(R, w):
    if not np.any(w):
        return R
    q = quat_multiply(axis_angle_to_quat(w), matrix_to_quat(R))
    return quat_to_matrix(q / np.linalg.norm(q))


def objective(points, sdf: SdfGrid, pose: Pose, t_bar=None, lam=0.0):
    """The refinement objective at ``pose`` (``t_bar`` defaults to the pose's translation)."""
    t_bar = pose.translation if t_bar is None else t_bar
    return _Objective(points, sdf, t_bar, lam).value(pose.translation, pose.R)


def objective_gradient(points, sdf: SdfGrid, pose: Pose, t_bar=None, lam=0.0, band=False):
    """Objective and its gradient w.r.t. translation and left rotation increment."""
    t_bar = pose.translation if t_bar is None else t_bar
    return _Objective(points, sdf, t_bar, lam).value_and_grad(pose.translation, pose.R, band=band)


def refine_pose(points, sdf: SdfGrid, init: Pose, cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Align camera-frame ``points`` to ``sdf`` starting from ``init``; the best pose seen is returned."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < MIN_SUPPORT:
        return RefineResult(init, float("nan"), 0, [], frozenset({"insufficient support"}))
    obj = _Objective(points, sdf, init.translation, cfg.lam)
    t, R = init.translation.copy(), init.R
    # rotation steps are scaled so they move points about as far as translation steps
    rho2 = max(float(np.mean(np.sum((points - t) ** 2, axis=1))), sdf.voxel_size ** 2)
    f, g_t, g_w = obj.value_and_grad(t, R)
    history = [f]
    alpha = cfg.init_step
    it = 0
    for it in range(1, cfg.max_iters + 1):
        d_t, d_w = -g_t, -g_w / rho2
        gnorm2 = g_t @ g_t + g_w @ g_w / rho2
        dnorm = np.sqrt(d_t @ d_t + rho2 * d_w @ d_w)
        if dnorm == 0:
            break
        step = alpha / dnorm  # alpha is the point displacement scale in meters
        accepted = False
        while step * dnorm >= cfg.step_tol:
            t_new = t + step * d_t
            R_new = _rotate(R, step * d_w)
            f_new = obj.value(t_new, R_new)
            if f_new <= f - cfg.armijo * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        t, R = t_new, R_new
        f, g_t, g_w = obj.value_and_grad(t, R)
        history.append(f)
        moved = step * dnorm
        alpha = min(2.0 * moved, cfg.init_step)
        if moved < cfg.step_tol:
            break
    pose = Pose(matrix_to_quat(R), t)
    return RefineResult(pose, f, it, history)


__all__ = ["MIN_SUPPORT", "RefineConfig", "RefineResult", "object_mask", "objective", "objective_gradient",
           "refine_pose", "visibility_mask"]
