"""Render-and-compare pose evaluation: color similarity ``s``, depth error ``e`` and the gate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import encode
from .geometry import Pose
from .mesh import TriangleMesh
from .refine import object_mask, visibility_mask
from .render import BACKGROUND, CameraIntrinsics, crop_roi, render

NO_SUPPORT = "no visible support"


@dataclass(frozen=True)
class GateConfig:
    s_star: float = 0.5
    e_star: float = 0.03  # m

    def __post_init__(self):
        if not -1.0 < self.s_star < 1.0:
            raise ValueError("s_star must lie in (-1, 1)")
        if self.e_star <= 0:
            raise ValueError("e_star must be positive")

    def accepts(self, s, e):
        return bool(s >= self.s_star and e <= self.e_star)


@dataclass(frozen=True)
class PoseVerdict:
    s: float
    e: float
    accepted: bool
    object_id: int = 0
    reason: str = ""

    def to_dict(self):
        return {"s": self.s, "e": self.e, "accepted": self.accepted, "object_id": self.object_id,
                "reason": self.reason}


def depth_error(D_render, D, omega):
    """Mean absolute depth difference over ``omega``; ``inf`` when it is empty."""
    omega = np.asarray(omega, dtype=bool)
    if not omega.any():
        return float("inf")
    return float(np.mean(np.abs(np.asarray(D_render)[omega] - np.asarray(D)[omega])))


def evaluate_pose(rendered_rgb, rendered_depth, rgb, D, omega, pose: Pose, diameter, K: CameraIntrinsics,
                  gate: GateConfig = GateConfig(), object_id=0, observed_mask=None) -> PoseVerdict:
    """Compare a render of the object at ``pose`` with the observation.

    ``rendered_rgb`` should show only the object (background elsewhere);
    ``observed_mask``, when given, paints the rest of the observed image
    background so both RoIs see the same kind of surroundings. Both RoIs are
    cropped at the projection of ``pose``.
    """
    omega = np.asarray(omega, dtype=bool)
    e = depth_error(rendered_depth, D, omega)
    if not np.isfinite(e):
        return PoseVerdict(-1.0, e, False, int(object_id), NO_SUPPORT)
    rgb = np.asarray(rgb, dtype=float)
    if observed_mask is not None:
        rgb = np.where(np.asarray(observed_mask, dtype=bool)[..., None], rgb, BACKGROUND)
    z = float(pose.translation[2])
    if z <= 0:
        return PoseVerdict(-1.0, e, False, int(object_id), "behind camera")
    u, v, _ = K.project(pose.translation)
    a = encode(crop_roi(rendered_rgb, (u, v), z, diameter, K))
    b = encode(crop_roi(rgb, (u, v), z, diameter, K))
    s = float(a.vector @ b.vector) if a.valid and b.valid else -1.0
    ok = gate.accepts(s, e)
    reason = "" if ok else ("low similarity" if s < gate.s_star else "depth error")
    return PoseVerdict(s, e, ok, int(object_id), reason)


@dataclass(frozen=True, eq=False)
class Evaluation:
    verdict: PoseVerdict
    omega: np.ndarray         # object mask (with the visibility margin), the refinement support
    support: np.ndarray       # predicted & rendered & both depths valid, where e is measured
    rendered_mask: np.ndarray
    rendered_depth: np.ndarray


def evaluate_estimate(mesh: TriangleMesh, pose: Pose, rgb, D, predicted, K: CameraIntrinsics,
                      gate: GateConfig = GateConfig(), margin=0.02, object_id=0, others=(),
                      light=None) -> Evaluation:
    """Render the estimate (with other estimated objects as occluders), build the object mask and gate it.

    The depth error uses every pixel that the segmenter and the render both
    assign to the object; the visibility-margin mask is returned for
    refinement.

    ``predicted`` is the segmenter's boolean mask for this object; ``others``
    holds ``(mesh, pose)`` estimates of the remaining objects, all in the
    camera frame.
    """
    scene = [(mesh, pose)] + list(others)
    kwargs = {} if light is None else {"light": light}
    r = render(scene, Pose(), K, ids=list(range(1, len(scene) + 1)), **kwargs)
    mine = r.mask == 1
    rend_depth = np.where(mine, r.depth, 0.0)
    rend_rgb = np.where(mine[..., None], r.rgb, BACKGROUND)
    D = np.asarray(D, dtype=float)
    predicted = np.asarray(predicted, dtype=bool)
    omega = object_mask(predicted, mine, visibility_mask(D, rend_depth, margin))
    # e is measured without the visibility margin, which would otherwise cap it at the margin
    support = predicted & mine & (D > 0)
    verdict = evaluate_pose(rend_rgb, rend_depth, rgb, D, support, pose, mesh.diameter, K, gate, object_id,
                            observed_mask=predicted)
    return Evaluation(verdict, omega, support, mine, rend_depth)


__all__ = ["Evaluation", "GateConfig", "NO_SUPPORT", "PoseVerdict", "depth_error", "evaluate_estimate",
           "evaluate_pose"]
