"""Command-line entry point (``selfpose``).

Exit codes: 0 success, 1 configuration or argument error, 2 run failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, default_text, load_config
from .mesh import MeshError, make_mesh

log = logging.getLogger("selfpose")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; here 2 means a failed run
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run_config(args):
    from .config import apply
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    if cfg is None:
        from .pipeline import RunConfig
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = apply(cfg, {"run.seed": args.seed})
    return cfg


def _mesh(spec):
    try:
        return make_mesh(spec)
    except MeshError as exc:
        raise ConfigError(str(exc)) from None


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def cmd_config(args):
    sys.stdout.write(default_text(_run_config(args)))


def cmd_build_sdf(args):
    from .sdf import build_sdf, save_sdf
    mesh = _mesh(args.mesh)
    if args.voxel is not None and args.voxel <= 0:
        raise ConfigError("--voxel must be positive")
    g = build_sdf(mesh, voxel_size=args.voxel)
    save_sdf(g, args.output)
    print(f"{mesh.name}: grid {tuple(g.values.shape)} voxel {g.voxel_size:.5f} m -> {args.output}")


def cmd_build_codebook(args):
    from .encoder import build_codebook, save_codebook
    cfg = _run_config(args)
    mesh = _mesh(args.mesh)
    dims = tuple(args.dims) if args.dims else None
    book = build_codebook(mesh, cfg.camera, **({"dims": dims} if dims else {}))
    save_codebook(book, args.output)
    print(f"{mesh.name}: {book.codes.shape[0]} codes on a {tuple(book.dims)} grid -> {args.output}")


def _assets(cfg, args):
    from .pipeline import load_assets
    return load_assets(cfg.objects, cfg.camera, args.assets)


def cmd_init(args):
    from .pipeline import init_trials
    cfg = _run_config(args)
    trials = init_trials(cfg, _assets(cfg, args), [cfg.seed], budget=cfg.init_budget)
    _emit({"seed": cfg.seed, "stage": cfg.stage, "objects": trials}, args.out)


def cmd_track(args):
    from .pipeline import _rng, pose_error, track_scene, write_sequence
    from .simulator import generate_scene, make_trajectory
    cfg = _run_config(args)
    assets = _assets(cfg, args)
    names = list(cfg.objects) if cfg.stage == "clutter" else list(cfg.objects)[:1]
    scene = generate_scene(names, cfg.workspace, _rng(cfg.seed, 0, 0))
    traj = make_trajectory(scene, cfg.n_waypoints, cfg.distance, cfg.elevation, _rng(cfg.seed, 0, 0, 1),
                           arc=cfg.arc)
    res = track_scene(scene, traj, assets, cfg, (cfg.seed, 0, 0), "scene_000_00")
    entry = write_sequence(res, args.out, assets, cfg.camera) if args.out else None
    errs = [pose_error(assets[r.name], r.pose, r.gt_pose) for r in res.records if r.gt_pose is not None]
    _emit({"sequence": res.name, "frames": res.frames, "records": len(res.records), "reinits": res.reinits,
           "aborted": res.aborted, "max_error": max(errs) if errs else None,
           "written": entry is not None})
    if res.aborted:
        raise RuntimeError("all objects lost; sequence aborted")


def cmd_collect(args):
    from .pipeline import collect
    cfg = _run_config(args)
    if args.scenes < 1 or args.interactions < 0:
        raise ConfigError("--scenes must be >= 1 and --interactions >= 0")
    m = collect(cfg, args.scenes, args.interactions, args.out, _assets(cfg, args))
    _emit(m["totals"])


def cmd_adapt(args):
    from .pipeline import adapt_and_compare, load_dataset
    from .simulator import domain_shift_noise
    from dataclasses import replace
    cfg = _run_config(args)
    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError("--alpha must lie in [0, 1]")
    if args.domain_shift:
        cfg = replace(cfg, noise=domain_shift_noise(cfg.noise))
    ds = load_dataset(args.data)
    if not ds.records:
        raise ConfigError(f"{args.data}: dataset has no records")
    seeds = range(args.held_out_offset, args.held_out_offset + args.held_out)
    res = adapt_and_compare(ds, _assets(cfg, args), args.alpha, cfg, seeds, budget=args.budget)
    if not args.trials:
        res.pop("trials")
    _emit(res, args.out)


def cmd_report(args):
    from .pipeline import load_assets, load_dataset, report
    ds = load_dataset(args.data)
    names = sorted({r["name"] for r in ds.records})
    summary = report(ds, load_assets(names, cache_dir=args.assets), args.out)
    print(json.dumps({"records": summary["records"], "add_auc": summary["add_auc"],
                      "frac_over_2cm": summary["frac_over_2cm"]}, sort_keys=True))


def build_parser():
    p = _Parser(prog="selfpose", description="Self-supervised 6D pose annotation on simulated RGB-D scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def runner(name, fn, help_, seed=True, assets=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value configuration file")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        if assets:
            sp.add_argument("--assets", help="directory caching SDFs and codebooks")
        sp.set_defaults(fn=fn)
        return sp

    sp = sub.add_parser("build-sdf", help="voxelize a mesh into a signed distance grid")
    sp.add_argument("mesh", help="corpus name (box, can, bracket, mug, sphere) or .obj path")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--voxel", type=float, help="voxel size in meters (default: from the mesh size)")
    sp.set_defaults(fn=cmd_build_sdf)

    sp = runner("build-codebook", cmd_build_codebook, "render rotation templates into a codebook",
                seed=False, assets=False)
    sp.add_argument("mesh")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))

    runner("config", cmd_config, "print the effective configuration", assets=False)

    sp = runner("init", cmd_init, "initialize every object of one generated scene")
    sp.add_argument("--out", help="also write the JSON result here")

    sp = runner("track", cmd_track, "initialize and track one scene along a trajectory")
    sp.add_argument("--out", help="dataset directory for the tracked sequence")

    sp = runner("collect", cmd_collect, "run the full collection loop")
    sp.add_argument("--scenes", type=int, required=True)
    sp.add_argument("--interactions", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = runner("adapt", cmd_adapt, "adapt codebooks on a dataset and compare on held-out scenes")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--data", required=True, help="dataset directory written by collect")
    sp.add_argument("--held-out", type=int, default=5, help="number of held-out scenes")
    sp.add_argument("--held-out-offset", type=int, default=1000)
    sp.add_argument("--budget", type=int, default=1, help="initialization attempts per object")
    sp.add_argument("--domain-shift", action="store_true", help="observe held-out scenes with a color shift")
    sp.add_argument("--trials", action="store_true", help="include per-object trial rows")
    sp.add_argument("--out")

    sp = sub.add_parser("report", help="summarize a dataset against its ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--assets")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure of the run itself
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
