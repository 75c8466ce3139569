"""The annotation loop: initialize every object from a high view, track it
along the camera trajectory, keep only frames that pass the evaluation gate,
interact with the scene and repeat.

Datasets are written as one directory per tracked sequence::

    <root>/manifest.json
    <root>/scene_000_00/frame_000_rgb.png     observed color
                        frame_000_depth.png   observed depth (16-bit mm)
                        frame_000_pred.png    segmenter labels
                        frame_000_label.png   annotation labels (accepted estimates)
                        annotations.jsonl     one record per accepted object and frame
                        ground_truth.jsonl    simulator truth, kept apart from the estimates
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoder import (Codebook, adapt_codebook, build_codebook, codebook_from_bytes, codebook_to_bytes, encode,
                      load_codebook, save_codebook)
from .evaluate import GateConfig, PoseVerdict, evaluate_estimate
from .filter import (FilterConfig, FilterError, ParticleSet, allocentric_cell, anchor, converge, estimate,
                     global_init, init_particles, propagate, update)
from .geometry import Pose, compose, invert
from .mesh import ModelPoints, TriangleMesh, sample_surface
from .metrics import add_metric, adds_metric, auc
from .refine import RefineConfig, refine_pose
from .render import (BACKGROUND, CameraIntrinsics, backproject, crop_roi, load_mask_png, load_rgb_png, render,
                     save_depth_png, save_mask_png, save_rgb_png)
from .sdf import SdfGrid, build_sdf, load_sdf, save_sdf, sdf_from_bytes, sdf_to_bytes
from .simulator import (DEFAULT_OBJECTS, NoiseModel, Observation, SegmenterModel, Trajectory, Workspace,
                        default_noise, generate_scene, grasp_place, make_trajectory, mesh_for, observe,
                        oracle_segment, push)

STAGES = ("single", "clutter")
MODEL_POINTS = 500


# --------------------------------------------------------------------------
# configuration and assets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    filter: FilterConfig = FilterConfig()
    refine: RefineConfig = RefineConfig()
    gate: GateConfig = GateConfig()
    noise: NoiseModel = field(default_factory=default_noise)
    segmenter: SegmenterModel = SegmenterModel()
    camera: CameraIntrinsics = CameraIntrinsics()
    objects: tuple = DEFAULT_OBJECTS
    workspace: Workspace = Workspace()
    n_waypoints: int = 20
    distance: float = 0.5        # m
    elevation: float = 55.0      # deg
    arc: float = 120.0           # deg of azimuth swept by the trajectory
    stage: str = "clutter"
    init_budget: int = 15        # initialization attempts per object
    init_confirm: int = 2        # accepted candidates compared (best s wins) before an init is final
    lost_after: int = 3          # consecutive rejected frames before re-initializing
    motion_prior: bool = True
    p_grasp: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if min(self.init_budget, self.init_confirm, self.lost_after, self.n_waypoints) < 1:
            raise ValueError("init_budget, init_confirm, lost_after and n_waypoints must be >= 1")


@dataclass(frozen=True, eq=False)
class ObjectAssets:
    name: str
    mesh: TriangleMesh
    sdf: SdfGrid
    book: Codebook
    points: ModelPoints

    @property
    def symmetric(self):
        return bool(self.mesh.symmetric)


def load_assets(names, K: CameraIntrinsics = CameraIntrinsics(), cache_dir=None, dims=None) -> dict:
    """SDF, codebook and model points per mesh name, cached on disk when ``cache_dir`` is given."""
    out = {}
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for name in dict.fromkeys(names):
        mesh = mesh_for(name)
        sdf = book = None
        if cache is not None and (cache / f"{name}.sdf").exists():
            sdf = load_sdf(cache / f"{name}.sdf")
        if cache is not None and (cache / f"{name}.cbk").exists():
            book = load_codebook(cache / f"{name}.cbk")
            if dims is not None and tuple(book.dims) != tuple(dims):
                book = None
        # freshly built assets pass through the stored precision, so a run
        # gives the same results whether or not the cache already existed
        if sdf is None:
            sdf = sdf_from_bytes(sdf_to_bytes(build_sdf(mesh)))
            if cache is not None:
                save_sdf(sdf, cache / f"{name}.sdf")
        if book is None:
            kw = {} if dims is None else {"dims": dims}
            book = codebook_from_bytes(codebook_to_bytes(build_codebook(mesh, K, **kw)))
            if cache is not None:
                save_codebook(book, cache / f"{name}.cbk")
        out[name] = ObjectAssets(name, mesh, sdf, book, sample_surface(mesh, MODEL_POINTS, seed=0))
    return out


def pose_error(assets: ObjectAssets, est: Pose, gt: Pose) -> float:
    """ADD, or ADD-S for symmetric objects."""
    return adds_metric(assets.points, est, gt) if assets.symmetric else add_metric(assets.points, est, gt)


def _rng(*key):
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


def _pose_dict(p: Pose):
    return {"q": [float(x) for x in p.rotation], "t": [float(x) for x in p.translation]}


def _pose_from(d) -> Pose:
    return Pose(np.array(d["q"]), np.array(d["t"]))


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ObjectTrack:
    oid: int
    name: str
    particles: ParticleSet | None = None
    pose: Pose | None = None          # latest accepted (refined) camera-frame pose
    verdict: PoseVerdict | None = None
    status: str = "pending"           # "tracking" | "failed"
    attempts: int = 0
    rejects: int = 0
    omega: np.ndarray | None = None

    @property
    def ok(self):
        return self.status == "tracking"


def _center(mask):
    """Centroid of the largest connected component of ``mask``."""
    lab, n = ndimage.label(mask)
    if n == 0:
        return None
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    v, u = np.nonzero(lab == 1 + int(np.argmax(sizes)))
    return float(u.mean()), float(v.mean())


def _gate_and_refine(asset: ObjectAssets, est: Pose, rgb, D, predicted, cfg: RunConfig, oid, others, light):
    """Evaluate an estimate, refine it on its object mask and gate the refined pose."""
    K = cfg.camera
    ev = evaluate_estimate(asset.mesh, est, rgb, D, predicted, K, cfg.gate, cfg.refine.margin, oid, others, light)
    pose = est
    if ev.omega.any():
        pts = backproject(D, ev.omega, K)
        res = refine_pose(pts, asset.sdf, est, cfg.refine)
        if not res.insufficient_support:
            pose = res.pose
            ev = evaluate_estimate(asset.mesh, pose, rgb, D, predicted, K, cfg.gate, cfg.refine.margin, oid,
                                   others, light)
    return pose, ev


def initialize_object(track: ObjectTrack, obs: Observation, predicted, asset: ObjectAssets, cfg: RunConfig,
                      seed_key, others=(), light=None, budget=None) -> ObjectTrack:
    """Sample, filter, refine and evaluate one object, retrying until enough candidates pass the gate."""
    K = cfg.camera
    budget = cfg.init_budget if budget is None else budget
    mask = np.asarray(predicted, dtype=bool)
    center = _center(mask)
    accepted = []
    for attempt in range(budget):
        rng = _rng(*seed_key, attempt)
        track.attempts += 1
        try:
            if center is not None:
                ps = init_particles(center, obs.depth, cfg.filter, rng, K, asset.book.dims, track.oid)
                ps = converge(ps, obs.rgb, obs.depth, K, asset.book, cfg.filter, mask=mask, seed=rng)
            elif cfg.stage == "single":
                ps = global_init(obs.rgb, obs.depth, K, cfg.filter, rng, asset.book.dims, track.oid)
                ps = converge(ps, obs.rgb, obs.depth, K, asset.book, cfg.filter, seed=rng)
                mask = np.asarray(obs.depth > 0)
            else:
                break
            if ps.needs_reinit:
                continue
            est = estimate(ps, K)
        except FilterError:
            continue
        pose, ev = _gate_and_refine(asset, est, obs.rgb, obs.depth, mask, cfg, track.oid, others, light)
        if ev.verdict.accepted:
            accepted.append((ev.verdict.s, ps, pose, ev))
            if len(accepted) >= cfg.init_confirm:
                break
        elif not accepted:
            track.verdict = ev.verdict
    if accepted:
        # look-alike poses can pass the gate; the best appearance match among the candidates wins
        _, ps, pose, ev = max(accepted, key=lambda a: a[0])
        track.particles, track.pose, track.omega, track.verdict = anchor(ps, pose, K), pose, ev.omega, ev.verdict
        track.status, track.rejects = "tracking", 0
        return track
    track.status = "failed"
    track.particles = None
    return track


def initialize_scene(obs: Observation, predicted_labels, names: dict, assets: dict, cfg: RunConfig,
                     seed_key=(0,), light=None, budget=None) -> dict:
    """Initialize every object id in ``names`` (oid -> mesh name). Returns ``{oid: ObjectTrack}``."""
    tracks = {}
    # most visible first, so likely occluders are already estimated for the rest
    order = sorted(names, key=lambda o: (-int(np.count_nonzero(predicted_labels == o)), o))
    for oid in order:
        others = [(assets[tracks[o].name].mesh, tracks[o].pose) for o in tracks if tracks[o].ok]
        t = ObjectTrack(oid, names[oid])
        tracks[oid] = initialize_object(t, obs, predicted_labels == oid, assets[names[oid]], cfg,
                                        tuple(seed_key) + (oid,), others, light, budget)
    return dict(sorted(tracks.items()))


# --------------------------------------------------------------------------
# tracking
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    sequence: str
    frame: int
    oid: int
    name: str
    pose: Pose              # estimated, camera frame
    camera_true: Pose
    camera_est: Pose
    verdict: PoseVerdict
    omega_pixels: int
    roi: dict
    gt_pose: Pose | None = None  # simulator truth, camera frame (persisted separately)

    def to_json(self):
        return {"sequence": self.sequence, "frame": self.frame, "object_id": self.oid, "name": self.name,
                "pose": _pose_dict(self.pose), "pose_world": _pose_dict(compose(self.camera_est, self.pose)),
                "camera_true": _pose_dict(self.camera_true), "camera_est": _pose_dict(self.camera_est),
                "verdict": self.verdict.to_dict(), "omega_pixels": self.omega_pixels, "roi": self.roi}


@dataclass(eq=False)
class SequenceResult:
    name: str
    records: list
    observations: list
    predictions: list
    tracks: dict
    frames: int
    aborted: bool = False
    reinits: int = 0
    gt: list = field(default_factory=list)   # per frame {oid: Pose}


def _record(seq, frame, track: ObjectTrack, obs: Observation, cam_est, asset: ObjectAssets, K):
    u, v, z = K.project(track.pose.translation)
    side = float(1.4 * K.fx * asset.mesh.diameter / z)
    return AnnotationRecord(seq, frame, track.oid, track.name, track.pose, obs.camera, cam_est, track.verdict,
                            int(track.omega.sum()), {"u": float(u), "v": float(v), "side": side},
                            obs.gt_poses.get(track.oid))


def track_scene(scene, trajectory: Trajectory, assets: dict, cfg: RunConfig, seed_key=(0,), name="scene",
                tracks=None) -> SequenceResult:
    """Initialize at waypoint 0, then follow the trajectory with one filter step per waypoint.

    ``scene`` may be a single Scene or one Scene per waypoint (objects that
    move between waypoints exercise the gate and re-initialization).
    """
    K = cfg.camera
    scenes = list(scene) if isinstance(scene, (list, tuple)) else [scene] * len(trajectory)
    if len(scenes) != len(trajectory):
        raise ValueError("need one scene per waypoint")
    names = {o.oid: o.name for o in scenes[0].objects}
    result = SequenceResult(name, [], [], [], {}, len(trajectory))
    cam_est = trajectory[0]
    prev = None
    for f, cam in enumerate(trajectory):
        sc = scenes[f]
        obs = observe(sc, cam, prev, cfg.noise, _rng(*seed_key, f, 1), K)
        pred = oracle_segment(obs, cfg.segmenter, _rng(*seed_key, f, 2))
        result.observations.append(obs)
        result.predictions.append(pred)
        result.gt.append(dict(obs.gt_poses))
        if f == 0:
            tracks = initialize_scene(obs, pred, names, assets, cfg, tuple(seed_key) + (f, 3)) \
                if tracks is None else tracks
            accepted = [t for t in tracks.values() if t.ok]
        else:
            cam_est = compose(cam_est, invert(obs.delta))
            delta = obs.delta if cfg.motion_prior else Pose()
            accepted = []
            for oid in sorted(tracks):
                t = tracks[oid]
                asset = assets[t.name]
                others = [(assets[tracks[o].name].mesh, tracks[o].pose) for o in sorted(tracks)
                          if o != oid and tracks[o].ok and tracks[o].pose is not None]
                mask = pred == oid
                rng = _rng(*seed_key, f, 4, oid)
                if t.particles is not None:
                    ps = propagate(t.particles, delta, K, cfg.filter, rng)
                    ps = update(ps, obs.rgb, obs.depth, K, asset.book, cfg.filter, mask=mask, seed=rng)
                    t.particles = ps
                    ok = False
                    if not ps.needs_reinit:
                        try:
                            est = estimate(ps, K)
                            pose, ev = _gate_and_refine(asset, est, obs.rgb, obs.depth, mask, cfg, oid, others,
                                                        None)
                            t.verdict = ev.verdict
                            ok = ev.verdict.accepted
                        except FilterError:
                            ok = False
                    if ok:
                        t.pose, t.omega, t.rejects, t.status = pose, ev.omega, 0, "tracking"
                        t.particles = anchor(ps, pose, K)
                        accepted.append(t)
                        continue
                    t.rejects += 1
                    t.status = "lost"
                    if t.rejects < cfg.lost_after:
                        continue
                # lost for too long (or never initialized): start over on this frame
                result.reinits += 1
                t.particles, t.rejects = None, 0
                initialize_object(t, obs, mask, asset, cfg, tuple(seed_key) + (f, 5, oid), others)
                if t.ok:
                    accepted.append(t)
            if not any(t.particles is not None for t in tracks.values()):
                result.aborted = True
        for t in accepted:
            result.records.append(_record(name, f, t, obs, cam_est, assets[t.name], K))
        prev = cam
        if result.aborted:
            result.frames = f + 1
            break
    result.tracks = tracks
    return result


# --------------------------------------------------------------------------
# collection and persistence
# --------------------------------------------------------------------------

def _annotation_labels(records, K: CameraIntrinsics, assets):
    if not records:
        return np.zeros((K.height, K.width), dtype=np.int32)
    r = render([(assets[rec.name].mesh, rec.pose) for rec in records], Pose(), K,
               ids=[rec.oid for rec in records])
    return r.mask


def write_sequence(result: SequenceResult, out_dir, assets, K: CameraIntrinsics, meta=None) -> dict:
    out = Path(out_dir) / result.name
    out.mkdir(parents=True, exist_ok=True)
    by_frame = {}
    for rec in result.records:
        by_frame.setdefault(rec.frame, []).append(rec)
    with open(out / "annotations.jsonl", "w") as fa, open(out / "ground_truth.jsonl", "w") as fg:
        for f in range(result.frames):
            obs = result.observations[f]
            recs = by_frame.get(f, [])
            if recs:
                stem = f"frame_{f:03d}"
                save_rgb_png(obs.rgb, out / f"{stem}_rgb.png")
                save_depth_png(obs.depth, out / f"{stem}_depth.png")
                save_mask_png(result.predictions[f], out / f"{stem}_pred.png")
                save_mask_png(_annotation_labels(recs, K, assets), out / f"{stem}_label.png")
            for rec in recs:
                fa.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            gt = {"frame": f, "camera": _pose_dict(obs.camera),
                  "objects": {str(oid): _pose_dict(compose(obs.camera, p))    # world frame
                              for oid, p in sorted(result.gt[f].items())}}
            fg.write(json.dumps(gt, sort_keys=True) + "\n")
    per_object = {}
    for rec in result.records:
        per_object[str(rec.oid)] = per_object.get(str(rec.oid), 0) + 1
    entry = {"name": result.name, "frames": result.frames, "frames_with_records": len(by_frame),
             "records": len(result.records), "per_object": dict(sorted(per_object.items())),
             "objects": {str(t.oid): t.name for t in sorted(result.tracks.values(), key=lambda t: t.oid)},
             "failed": sorted(int(t.oid) for t in result.tracks.values() if t.status == "failed"),
             "reinits": result.reinits, "aborted": result.aborted}
    if meta:
        entry.update(meta)
    return entry


def _write_manifest(path, manifest):
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)


def collect(cfg: RunConfig, n_scenes, interactions, out_dir, assets=None, scene_offset=0) -> dict:
    """Run the full loop and write a dataset; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    assets = load_assets(cfg.objects, cfg.camera) if assets is None else assets
    names = list(cfg.objects) if cfg.stage == "clutter" else list(cfg.objects)[:1]
    manifest = {"seed": cfg.seed, "stage": cfg.stage, "objects": names, "scenes": n_scenes,
                "interactions": interactions, "sequences": [], "complete": False}
    for s in range(scene_offset, scene_offset + n_scenes):
        scene = generate_scene(names, cfg.workspace, _rng(cfg.seed, s, 0))
        for k in range(interactions + 1):
            traj = make_trajectory(scene, cfg.n_waypoints, cfg.distance, cfg.elevation, _rng(cfg.seed, s, k, 1),
                                   arc=cfg.arc)
            name = f"scene_{s:03d}_{k:02d}"
            res = track_scene(scene, traj, assets, cfg, (cfg.seed, s, k), name)
            meta = {"scene": s, "step": k, "stage": cfg.stage}
            if k < interactions:
                ids = scene.ids
                oid = ids[k % len(ids)]
                act = push(scene, oid, _rng(cfg.seed, s, k, 2)) if k % 2 == 0 else \
                    grasp_place(scene, oid, _rng(cfg.seed, s, k, 2), cfg.p_grasp)
                meta["interaction"] = {"kind": act.kind, "object_id": oid, "ok": act.ok, "note": act.note}
                scene = act.scene
            manifest["sequences"].append(write_sequence(res, out, assets, cfg.camera, meta))
            _write_manifest(out / "manifest.json", manifest)
    manifest["totals"] = {
        "sequences": len(manifest["sequences"]),
        "frames": sum(e["frames"] for e in manifest["sequences"]),
        "images": sum(e["frames_with_records"] for e in manifest["sequences"]),
        "records": sum(e["records"] for e in manifest["sequences"]),
    }
    manifest["complete"] = True
    _write_manifest(out / "manifest.json", manifest)
    return manifest


@dataclass(frozen=True, eq=False)
class Dataset:
    root: Path
    manifest: dict
    records: list           # dicts as written
    ground_truth: dict      # (sequence, frame, oid) -> Pose


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    records, gt = [], {}
    for entry in manifest["sequences"]:
        seq = root / entry["name"]
        for line in (seq / "annotations.jsonl").read_text().splitlines():
            records.append(json.loads(line))
        for line in (seq / "ground_truth.jsonl").read_text().splitlines():
            g = json.loads(line)
            w2c = invert(_pose_from(g["camera"]))
            for oid, p in g["objects"].items():
                gt[(entry["name"], g["frame"], int(oid))] = compose(w2c, _pose_from(p))
    return Dataset(root, manifest, records, gt)


def verify_gate(ds: Dataset, gate: GateConfig = GateConfig()) -> bool:
    return all(r["verdict"]["accepted"] and gate.accepts(r["verdict"]["s"], r["verdict"]["e"]) for r in ds.records)


def record_errors(ds: Dataset, assets: dict):
    """``[(record, ADD, ADD-S)]`` against the separately stored ground truth."""
    out = []
    for r in ds.records:
        gt = ds.ground_truth[(r["sequence"], r["frame"], r["object_id"])]
        est = _pose_from(r["pose"])
        pts = assets[r["name"]].points
        out.append((r, add_metric(pts, est, gt), adds_metric(pts, est, gt)))
    return out


# --------------------------------------------------------------------------
# self-supervised adaptation
# --------------------------------------------------------------------------

def training_samples(ds: Dataset, K: CameraIntrinsics = CameraIntrinsics(), dims=None):
    """``{name: [(roi_image, cell)]}`` from persisted frames, labeled by the estimated rotation cell."""
    out = {}
    cache = {}
    for r in ds.records:
        seq_dir = ds.root / r["sequence"]
        key = (r["sequence"], r["frame"])
        if key not in cache:
            stem = f"frame_{r['frame']:03d}"
            cache = {key: (load_rgb_png(seq_dir / f"{stem}_rgb.png"), load_mask_png(seq_dir / f"{stem}_pred.png"))}
        rgb, pred = cache[key]
        pose = _pose_from(r["pose"])
        mesh = mesh_for(r["name"])
        img = np.where((pred == r["object_id"])[..., None], rgb, BACKGROUND)
        roi = crop_roi(img, (r["roi"]["u"], r["roi"]["v"]), float(pose.translation[2]), mesh.diameter, K)
        cell = allocentric_cell(pose, dims) if dims is not None else allocentric_cell(pose)
        out.setdefault(r["name"], []).append((encode(roi), cell))
    return out


def adapt_books(assets: dict, samples: dict, alpha: float) -> dict:
    return {name: replace(a, book=adapt_codebook(a.book, samples.get(name, []), alpha)) for name, a in assets.items()}


def init_trials(cfg: RunConfig, assets: dict, scene_seeds, budget=1, success_add=0.02):
    """Initialize held-out scenes; per object: accepted, s, pose error."""
    out = []
    names = list(cfg.objects) if cfg.stage == "clutter" else list(cfg.objects)[:1]
    for sd in scene_seeds:
        scene = generate_scene(names, cfg.workspace, _rng(cfg.seed, sd, 100))
        traj = make_trajectory(scene, 1, cfg.distance, cfg.elevation, _rng(cfg.seed, sd, 101))
        obs = observe(scene, traj[0], None, cfg.noise, _rng(cfg.seed, sd, 102), cfg.camera)
        pred = oracle_segment(obs, cfg.segmenter, _rng(cfg.seed, sd, 103))
        tracks = initialize_scene(obs, pred, {o.oid: o.name for o in scene.objects}, assets, cfg,
                                  (cfg.seed, sd, 104), budget=budget)
        for oid, t in sorted(tracks.items()):
            err = pose_error(assets[t.name], t.pose, obs.gt_poses[oid]) if t.ok else float("inf")
            # s is undefined when no candidate pose was ever evaluated
            s = float(t.verdict.s) if t.verdict is not None else None
            out.append({"scene": sd, "object_id": oid, "name": t.name, "accepted": t.ok, "s": s,
                        "error": float(err), "success": bool(t.ok and err < success_add)})
    return out


def _summary(trials):
    """Rates over all trials; ``mean_s`` over the trials that produced an evaluated pose."""
    if not trials:
        return {"n": 0, "success_rate": 0.0, "accept_rate": 0.0, "evaluated": 0, "mean_s": None, "mean_error": None}
    errs = [t["error"] for t in trials if np.isfinite(t["error"])]
    sims = [t["s"] for t in trials if t["s"] is not None]
    return {"n": len(trials), "success_rate": float(np.mean([t["success"] for t in trials])),
            "accept_rate": float(np.mean([t["accepted"] for t in trials])),
            "evaluated": len(sims), "mean_s": float(np.mean(sims)) if sims else None,
            "mean_error": float(np.mean(errs)) if errs else None}


def adapt_and_compare(ds: Dataset, assets: dict, alpha: float, cfg: RunConfig, held_out_seeds, budget=1) -> dict:
    """Adapt every codebook on the dataset's RoIs and compare initialization on held-out scenes."""
    samples = training_samples(ds, cfg.camera)
    adapted = adapt_books(assets, samples, alpha)
    before = init_trials(cfg, assets, held_out_seeds, budget)
    after = init_trials(cfg, adapted, held_out_seeds, budget)
    return {"alpha": alpha, "samples": {k: len(v) for k, v in sorted(samples.items())},
            "unadapted": _summary(before), "adapted": _summary(after),
            "trials": {"unadapted": before, "adapted": after}}


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

AUC_MAX = 0.1  # m


def report(ds: Dataset, assets: dict, out_dir=None) -> dict:
    """Per-object ADD / ADD-S statistics, AUCs and acceptance rates."""
    errs = record_errors(ds, assets) if ds.records else []
    by_obj = {}
    for r, add, adds in errs:
        err = adds if assets[r["name"]].symmetric else add
        by_obj.setdefault(r["name"], []).append((add, adds, err))
    offered = {}
    for e in ds.manifest.get("sequences", []):
        for oid, name in e.get("objects", {}).items():
            offered[name] = offered.get(name, 0) + e["frames"]
    objects = {}
    for name in sorted(set(by_obj) | set(offered)):
        vals = np.array(by_obj.get(name, []), dtype=float).reshape(-1, 3)
        has = len(vals) > 0
        objects[name] = {
            "records": int(len(vals)),
            "symmetric": bool(assets[name].symmetric) if name in assets else False,
            "acceptance_rate": float(len(vals) / offered[name]) if offered.get(name) else 0.0,
            "add_mean": float(vals[:, 0].mean()) if has else None,
            "add_median": float(np.median(vals[:, 0])) if has else None,
            "adds_mean": float(vals[:, 1].mean()) if has else None,
            "add_auc": auc(vals[:, 0], AUC_MAX) if has else 0.0,
            "adds_auc": auc(vals[:, 1], AUC_MAX) if has else 0.0,
            "frac_over_2cm": float(np.mean(vals[:, 2] > 0.02)) if has else 0.0,
        }
    stages = {}
    for e in ds.manifest.get("sequences", []):
        st = stages.setdefault(e.get("stage", "clutter"), {"sequences": 0, "records": 0, "frames": 0})
        st["sequences"] += 1
        st["records"] += e["records"]
        st["frames"] += e["frames"] * max(len(e.get("objects", {})), 1)
    for st in stages.values():
        st["acceptance_rate"] = st["records"] / st["frames"] if st["frames"] else 0.0
    all_vals = np.array([v for vs in by_obj.values() for v in vs], dtype=float).reshape(-1, 3)
    has = len(all_vals) > 0
    # the 2 cm soundness figure uses ADD-S for symmetric objects, ADD otherwise
    summary = {"records": len(errs), "auc_max_threshold": AUC_MAX, "objects": objects, "stages": stages,
               "add_auc": auc(all_vals[:, 0], AUC_MAX) if has else 0.0,
               "frac_over_2cm": float(np.mean(all_vals[:, 2] > 0.02)) if has else 0.0}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        with open(out / "records.csv", "w") as fh:
            fh.write("sequence,frame,object_id,name,s,e,add,adds\n")
            for r, add, adds in sorted(errs, key=lambda x: (x[0]["sequence"], x[0]["frame"], x[0]["object_id"])):
                fh.write(f"{r['sequence']},{r['frame']},{r['object_id']},{r['name']},{r['verdict']['s']:.6f},"
                         f"{r['verdict']['e']:.6f},{add:.6f},{adds:.6f}\n")
    return summary
