"""Synthetic robot cell: scenes on a table, wrist-camera trajectories, noisy
forward kinematics, sensor corruption, an oracle segmenter and pose-level
push / grasp-place interactions.

World frame: z up, table plane z = 0. Camera poses map camera-frame points
into the world. Everything is deterministic given the explicit seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .geometry import Pose, axis_angle_to_quat, compose, invert, matrix_to_quat, quat_multiply
from .mesh import TriangleMesh, make_mesh, sample_surface
from .render import DEFAULT_LIGHT, CameraIntrinsics, render
from .sdf import SdfGrid, build_sdf, sample_sdf

MAX_TRIES = 1000
DEFAULT_OBJECTS = ("box", "can", "bracket", "mug", "sphere")


class SimulatorError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def mesh_for(name: str) -> TriangleMesh:
    return make_mesh(name)


@lru_cache(maxsize=None)
def sdf_for(name: str) -> SdfGrid:
    return build_sdf(mesh_for(name))


@lru_cache(maxsize=None)
def _surface(name: str, n: int = 400):
    return sample_surface(mesh_for(name), n, seed=7).points


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# --------------------------------------------------------------------------
# Scene
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    """Axis-aligned table region ``[lo, hi]`` in x and y (meters)."""
    lo: tuple = (-0.15, -0.15)
    hi: tuple = (0.15, 0.15)

    @property
    def center(self):
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def contains(self, xy, tol=1e-9):
        xy = np.atleast_2d(xy)
        return bool(np.all(xy >= np.array(self.lo) - tol) and np.all(xy <= np.array(self.hi) + tol))


@dataclass(frozen=True, eq=False)
class SceneObject:
    oid: int
    name: str
    pose: Pose   # object frame -> world

    @property
    def mesh(self):
        return mesh_for(self.name)


@dataclass(frozen=True, eq=False)
class Scene:
    objects: tuple
    workspace: Workspace = Workspace()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def ids(self):
        return [o.oid for o in self.objects]

    def get(self, oid) -> SceneObject:
        for o in self.objects:
            if o.oid == oid:
                return o
        raise KeyError(f"no object {oid} in scene")

    def with_pose(self, oid, pose: Pose) -> "Scene":
        return replace(self, objects=tuple(replace(o, pose=pose) if o.oid == oid else o for o in self.objects))

    def centroid(self):
        if not self.objects:
            c = self.workspace.center
            return np.array([c[0], c[1], 0.0])
        return np.mean([o.pose.translation for o in self.objects], axis=0)

    def render_list(self):
        return [(o.mesh, o.pose) for o in self.objects]


def clearance(a: SceneObject, b: SceneObject) -> float:
    """Smallest SDF value of either object's surface samples inside the other."""
    ra, rb = a.mesh.diameter / 2, b.mesh.diameter / 2
    if np.linalg.norm(a.pose.translation - b.pose.translation) > ra + rb:
        return float(np.linalg.norm(a.pose.translation - b.pose.translation) - ra - rb)
    worst = np.inf
    for x, y in ((a, b), (b, a)):
        pts = invert(y.pose).apply(x.pose.apply(_surface(x.name)))
        worst = min(worst, float(sample_sdf(sdf_for(y.name), pts, with_gradient=False).min()))
    return worst


def penetration_ok(a: SceneObject, b: SceneObject) -> bool:
    return clearance(a, b) >= -2.0 * min(sdf_for(a.name).voxel_size, sdf_for(b.name).voxel_size)


def in_workspace(obj: SceneObject, ws: Workspace) -> bool:
    return ws.contains(obj.pose.apply(obj.mesh.vertices)[:, :2])


def scene_valid(scene: Scene) -> bool:
    objs = scene.objects
    if not all(in_workspace(o, scene.workspace) for o in objs):
        return False
    return all(penetration_ok(objs[i], objs[j]) for i in range(len(objs)) for j in range(i + 1, len(objs)))


def _fits(obj: SceneObject, scene: Scene, skip=None) -> bool:
    if not in_workspace(obj, scene.workspace):
        return False
    return all(penetration_ok(obj, o) for o in scene.objects if o.oid != skip and o.oid != obj.oid)


# canonical resting orientations: each object axis (both signs) pointing up
_REST_AXES = [np.array(v, dtype=float) for v in
              ((0, 0, 1), (0, 0, -1), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0))]


def _rest_rotation(k: int):
    """Rotation taking object axis ``_REST_AXES[k]`` onto world +z."""
    a = _REST_AXES[k]
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, z)
    s, c = np.linalg.norm(axis), a @ z
    if s < 1e-12:
        return np.array([1.0, 0, 0, 0]) if c > 0 else np.array([0.0, 1.0, 0, 0])
    return axis_angle_to_quat(axis / s * np.arctan2(s, c))


def resting_pose(mesh: TriangleMesh, rest: int, yaw: float, xy) -> Pose:
    """Pose resting on the table: lowest vertex at z = 0."""
    q = quat_multiply(axis_angle_to_quat([0.0, 0.0, yaw]), _rest_rotation(rest))
    R = Pose(q).R
    z = -float((mesh.vertices @ R.T)[:, 2].min())
    return Pose(q, (xy[0], xy[1], z))


def generate_scene(names=DEFAULT_OBJECTS, workspace: Workspace = Workspace(), seed=0, upright=True) -> Scene:
    """Rejection-sample non-penetrating resting poses.

    ``upright`` keeps every object on its first canonical face; otherwise a
    canonical resting face is drawn per object.
    """
    rng = _rng(seed)
    scene = Scene((), workspace)
    lo, hi = np.array(workspace.lo), np.array(workspace.hi)
    for i, name in enumerate(names):
        mesh = mesh_for(name)
        for _ in range(MAX_TRIES):
            rest = 0 if upright else int(rng.integers(len(_REST_AXES)))
            yaw = rng.uniform(0, 2 * np.pi)
            # keep the whole footprint inside the workspace
            probe = resting_pose(mesh, rest, yaw, (0.0, 0.0))
            foot = probe.apply(mesh.vertices)[:, :2]
            a, b = lo - foot.min(axis=0), hi - foot.max(axis=0)
            if np.any(a > b + 1e-12):
                continue
            xy = rng.uniform(a, np.maximum(a, b))
            obj = SceneObject(i + 1, name, resting_pose(mesh, rest, yaw, xy))
            if _fits(obj, scene):
                scene = replace(scene, objects=scene.objects + (obj,))
                break
        else:
            raise SimulatorError("workspace too crowded")
    return scene


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------

def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target = np.asarray(eye, dtype=float), np.asarray(target, dtype=float)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(matrix_to_quat(np.column_stack([x, y, z])), eye)


@dataclass(frozen=True, eq=False)
class Trajectory:
    waypoints: tuple
    target: np.ndarray

    def __len__(self):
        return len(self.waypoints)

    def __iter__(self):
        return iter(self.waypoints)

    def __getitem__(self, i):
        return self.waypoints[i]


def make_trajectory(scene: Scene, n=20, distance=0.5, elevation=55.0, seed=0, arc=120.0,
                    final_elevation=35.0, target_jitter=0.0) -> Trajectory:
    """Waypoint 0 at the high-elevation view; the rest sweep an arc of
    azimuth ``arc`` degrees while descending to ``final_elevation``.

    ``target_jitter`` (m) moves each later waypoint's look-at point uniformly
    within a horizontal disc of that radius, so the camera pans between views
    and objects jump across the image.
    """
    if n < 1:
        raise ValueError("need at least one waypoint")
    if target_jitter < 0:
        raise ValueError("target_jitter must be non-negative")
    rng = _rng(seed)
    target = scene.centroid().copy()
    az0 = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(n):
        f = k / (n - 1) if n > 1 else 0.0
        el = np.radians(elevation + f * (final_elevation - elevation))
        az = az0 + np.radians(arc) * f
        eye = target + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        look = target
        if k > 0 and target_jitter > 0:
            r, a = target_jitter * np.sqrt(rng.random()), rng.uniform(0, 2 * np.pi)
            look = target + np.array([r * np.cos(a), r * np.sin(a), 0.0])
        poses.append(look_at(eye, look))
    return Trajectory(tuple(poses), target)


# --------------------------------------------------------------------------
# Sensor and kinematics noise
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    fk_rot_sigma: float = 0.0      # rad per step (axis-angle components)
    fk_trans_sigma: float = 0.0    # m per step
    fk_pivot: float = 0.0          # m along the optical axis about which FK rotation error acts (0 = camera)
    calib_bias: Pose = field(default_factory=Pose)
    depth_sigma: float = 0.0       # m
    dropout: float = 0.0
    brightness: float = 0.0        # added to every RGB channel
    rgb_sigma: float = 0.0
    rgb_gain: tuple = (1.0, 1.0, 1.0)  # per-channel gain (color cast)
    light: tuple | None = None     # light direction of the observed domain; None = rendering default

    def __post_init__(self):
        for name in ("fk_rot_sigma", "fk_trans_sigma", "fk_pivot", "depth_sigma", "rgb_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")

    @property
    def domain_shifted(self):
        # plain sensor noise (rgb_sigma) is not a shift of the appearance domain
        return self.brightness != 0 or tuple(self.rgb_gain) != (1.0, 1.0, 1.0) or self.light is not None

    def without_domain_shift(self):
        return replace(self, brightness=0.0, rgb_gain=(1.0, 1.0, 1.0), light=None)


def default_noise() -> NoiseModel:
    """Moderate sensor and kinematics noise used when nothing else is configured."""
    return NoiseModel(fk_rot_sigma=0.01, fk_trans_sigma=0.005, depth_sigma=0.002, dropout=0.01,
                      rgb_sigma=0.01)


def domain_shift_noise(base: NoiseModel | None = None) -> NoiseModel:
    """``base`` plus a color cast, a brightness offset and a different light."""
    base = default_noise() if base is None else base
    return replace(base, brightness=0.05, rgb_gain=(1.15, 0.9, 0.75), rgb_sigma=max(base.rgb_sigma, 0.02),
                   light=(-0.5, -0.3, 1.0))


def true_delta(prev_cam: Pose, cam: Pose) -> Pose:
    """Motion mapping previous-camera-frame points into the current camera frame."""
    return compose(invert(cam), prev_cam)


def noisy_delta(delta: Pose, noise: NoiseModel, rng) -> Pose:
    """``calib_bias^-1 ∘ (FK noise ∘ delta) ∘ calib_bias``."""
    w = noise.fk_rot_sigma * rng.standard_normal(3)
    v = noise.fk_trans_sigma * rng.standard_normal(3)
    q = axis_angle_to_quat(w)
    # rotating about (0, 0, pivot) keeps the error seen at that depth equal to the sampled one
    p = np.array([0.0, 0.0, noise.fk_pivot])
    jitter = Pose(q, v + p - Pose(q).apply(p))
    B = noise.calib_bias
    return compose(invert(B), compose(compose(jitter, delta), B))


@dataclass(frozen=True, eq=False)
class Observation:
    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray            # ground-truth label image (object ids, 0 = background)
    camera: Pose                  # true camera pose
    delta: Pose                   # reported (noisy) motion from the previous waypoint
    true_delta: Pose
    gt_poses: dict                # oid -> object pose in the camera frame

    def mask(self, oid):
        return self.labels == oid


def observe(scene: Scene, cam: Pose, prev_cam: Pose | None, noise: NoiseModel, seed=0,
            K: CameraIntrinsics = CameraIntrinsics()) -> Observation:
    rng = _rng(seed)
    light = DEFAULT_LIGHT if noise.light is None else np.asarray(noise.light, dtype=float)
    ids = scene.ids
    r = render(scene.render_list(), cam, K, light=light, ids=ids)
    D = r.depth.copy()
    if noise.depth_sigma > 0:
        D = np.where(D > 0, D + noise.depth_sigma * rng.standard_normal(D.shape), 0.0)
        D = np.maximum(D, 0.0)
    if noise.dropout > 0:
        D = np.where(rng.random(D.shape) < noise.dropout, 0.0, D)
    rgb = r.rgb * np.asarray(noise.rgb_gain, dtype=float) + noise.brightness
    if noise.rgb_sigma > 0:
        rgb = rgb + noise.rgb_sigma * rng.standard_normal(rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    if prev_cam is None:
        d_true = Pose()
        d_rep = Pose()
    else:
        d_true = true_delta(prev_cam, cam)
        d_rep = noisy_delta(d_true, noise, rng)
    w2c = invert(cam)
    gt = {o.oid: compose(w2c, o.pose) for o in scene.objects}
    return Observation(rgb, D, r.mask, cam, d_rep, d_true, gt)


# --------------------------------------------------------------------------
# Oracle segmenter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmenterModel:
    boundary: int = 0          # px; > 0 dilates, < 0 erodes each object mask
    flip_rate: float = 0.0     # per-pixel probability of a random label
    miss_rate: float = 0.0     # per-object probability of being entirely absent
    miss: dict = field(default_factory=dict)  # oid -> miss rate override

    def __post_init__(self):
        if not (0.0 <= self.flip_rate <= 1.0 and 0.0 <= self.miss_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")


def oracle_segment(obs: Observation, model: SegmenterModel = SegmenterModel(), seed=0) -> np.ndarray:
    """Corrupted copy of the ground-truth label image."""
    rng = _rng(seed)
    gt = obs.labels
    out = np.zeros_like(gt)
    ids = [int(i) for i in np.unique(gt) if i != 0]
    for oid in ids:
        rate = model.miss.get(oid, model.miss_rate)
        if rng.random() < rate:
            continue
        m = gt == oid
        if model.boundary > 0:
            m = ndimage.binary_dilation(m, iterations=model.boundary)
            m &= (out == 0) & ((gt == 0) | (gt == oid))
        elif model.boundary < 0:
            m = ndimage.binary_erosion(m, iterations=-model.boundary)
        out[m] = oid
    if model.flip_rate > 0 and ids:
        flip = rng.random(gt.shape) < model.flip_rate
        labels = np.array([0] + ids)
        out = np.where(flip, labels[rng.integers(len(labels), size=gt.shape)], out)
    return out


# --------------------------------------------------------------------------
# Interactions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Interaction:
    scene: Scene
    kind: str
    oid: int
    ok: bool
    note: str = ""


def push(scene: Scene, oid, seed=0, jitter_deg=15.0, radius=(0.03, 0.12), yaw_jitter_deg=20.0) -> Interaction:
    """Slide an object toward the others' centroid (or the workspace center when alone)."""
    rng = _rng(seed)
    obj = scene.get(oid)
    others = [o for o in scene.objects if o.oid != oid]
    p = obj.pose.translation
    target = np.mean([o.pose.translation for o in others], axis=0)[:2] if others else scene.workspace.center
    d = target - p[:2]
    if np.linalg.norm(d) < 1e-9:
        d = np.array([1.0, 0.0])
    base = np.arctan2(d[1], d[0])
    ang = base + np.radians(rng.uniform(-jitter_deg, jitter_deg))
    direction = np.array([np.cos(ang), np.sin(ang)])
    r = rng.uniform(*radius)
    yaw = np.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg))
    q = quat_multiply(axis_angle_to_quat([0.0, 0.0, yaw]), obj.pose.rotation)
    while r >= 0.005:
        moved = SceneObject(oid, obj.name, Pose(q, (p[0] + r * direction[0], p[1] + r * direction[1], p[2])))
        if _fits(moved, scene, skip=oid):
            return Interaction(scene.with_pose(oid, moved.pose), "push", oid, True)
        r *= 0.8
    return Interaction(scene, "push", oid, False, "no valid displacement")


def grasp_place(scene: Scene, oid, seed=0, p_grasp=0.9, upright=False) -> Interaction:
    """Pick an object up, reorient it and place it elsewhere; a failed grasp only nudges it."""
    rng = _rng(seed)
    obj = scene.get(oid)
    mesh = obj.mesh
    if rng.random() < p_grasp:
        lo, hi = np.array(scene.workspace.lo), np.array(scene.workspace.hi)
        for _ in range(MAX_TRIES):
            rest = 0 if upright else int(rng.integers(len(_REST_AXES)))
            yaw = rng.uniform(0, 2 * np.pi)
            xy = rng.uniform(lo, hi)
            placed = SceneObject(oid, obj.name, resting_pose(mesh, rest, yaw, xy))
            if _fits(placed, scene, skip=oid):
                return Interaction(scene.with_pose(oid, placed.pose), "grasp_place", oid, True)
        return Interaction(scene, "grasp_place", oid, False, "no valid placement")
    # slipped grasp: small planar perturbation
    p = obj.pose.translation
    for _ in range(MAX_TRIES):
        step = rng.uniform(-1, 1, 2)
        step *= rng.uniform(0, 0.02) / max(np.linalg.norm(step), 1e-12)
        yaw = np.radians(rng.uniform(-10.0, 10.0))
        q = quat_multiply(axis_angle_to_quat([0.0, 0.0, yaw]), obj.pose.rotation)
        moved = SceneObject(oid, obj.name, Pose(q, (p[0] + step[0], p[1] + step[1], p[2])))
        if _fits(moved, scene, skip=oid):
            return Interaction(scene.with_pose(oid, moved.pose), "grasp_place", oid, True, "grasp slipped")
    return Interaction(scene, "grasp_place", oid, True, "grasp slipped")


__all__ = ["DEFAULT_OBJECTS", "Interaction", "NoiseModel", "Observation", "Scene", "SceneObject",
           "SegmenterModel", "SimulatorError", "Trajectory", "Workspace", "clearance", "default_noise",
           "domain_shift_noise", "generate_scene", "grasp_place", "look_at", "make_trajectory", "mesh_for",
           "noisy_delta", "observe", "oracle_segment", "penetration_ok", "push", "resting_pose", "scene_valid",
           "sdf_for", "true_delta"]
