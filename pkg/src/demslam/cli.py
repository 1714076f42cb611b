"""Command-line driver: one subcommand per pipeline stage.

Human-readable output goes to stdout; a machine-parseable JSON event stream
goes to stderr.  Exit codes: 0 success, 1 internal error, 2 user/input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import apply_overrides, load_config
from .errors import (ConfigError, DemSlamError, DependencyError,
                     UserInputError)
from . import pipeline, synthetic


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="demslam",
        description="DEM-based SLAM back-end: rasterize, retrieve, optimize.")
    p.add_argument("--session", default="session", help="session directory")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel workers for per-tile loops")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="filter and store submap clouds")
    s.add_argument("--manifest", required=True)
    s.add_argument("--d-min", type=float, default=None)
    s.add_argument("--d-max", type=float, default=None)

    s = sub.add_parser("dem", help="fit plane, rasterize height tiles")
    s.add_argument("--reducer", choices=["mean", "max", "softmax"], default=None)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--target-px", type=int, default=None)
    s.add_argument("--tile-px", type=int, default=None)
    s.add_argument("--alpha-edge", type=float, default=None)

    s = sub.add_parser("embed", help="tile and chip descriptors")
    s.add_argument("--encoder", choices=["builtin", "tokens"], default=None)
    s.add_argument("--tokens-dir", default=None)

    s = sub.add_parser("index", help="build the gallery ANN index")
    s.add_argument("--M", type=int, default=None, dest="m")
    s.add_argument("--efc", type=int, default=None)

    s = sub.add_parser("query", help="retrieve neighbor tiles per chip")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--efs", type=int, default=None)

    s = sub.add_parser("loops", help="vote, rerank, estimate loop edges")
    s.add_argument("--tau-s", type=float, default=None)
    s.add_argument("--topk", type=int, default=None)
    s.add_argument("--rho", type=float, default=None)

    s = sub.add_parser("optimize", help="pose-graph Gauss-Newton")
    s.add_argument("--max-iters", type=int, default=None)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--huber", type=float, default=None)

    s = sub.add_parser("eval", help="ATE against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--est", default=None)
    s.add_argument("--align", choices=["sim3", "se3"], default=None)
    s.add_argument("--max-dt", type=float, default=None)

    s = sub.add_parser("render", help="preview PNGs of the merged DEM")
    s.add_argument("--hillshade", action="store_true")
    s.add_argument("--colormap", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--scene", default=None, help="scene spec JSON (optional)")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("run", help="full pipeline: ingest through optimize")
    s.add_argument("--manifest", required=True)
    s.add_argument("--gt", default=None)

    return p


def _dispatch(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    cfg.validate()
    session = pipeline.Session(args.session, cfg)

    cmd = args.command
    if cmd == "ingest":
        apply_overrides(cfg, "ingest", d_min=args.d_min, d_max=args.d_max)
        out = pipeline.run_ingest(session, args.manifest)
        print(f"ingested {out['submaps']} submaps")
    elif cmd == "dem":
        apply_overrides(cfg, "dem", reducer=args.reducer, tau=args.tau,
                        target_px_long=args.target_px, tile_px=args.tile_px,
                        alpha_edge=args.alpha_edge)
        out = pipeline.run_dem(session)
        print(f"rasterized {len(out['rasterized'])} submaps at "
              f"{out['mpp']:.4f} m/px")
    elif cmd == "embed":
        kind = {"builtin": "builtin", "tokens": "tokens", None: None}[args.encoder]
        apply_overrides(cfg, "encoder", kind=kind, tokens_dir=args.tokens_dir)
        out = pipeline.run_embed(session)
        print(f"embedded {sum(out.values())} tiles across {len(out)} submaps")
    elif cmd == "index":
        apply_overrides(cfg, "index", m=args.m, ef_construction=args.efc)
        out = pipeline.run_index(session)
        print(f"indexed {out['entries']} descriptors")
    elif cmd == "query":
        apply_overrides(cfg, "retrieval", k=args.k)
        apply_overrides(cfg, "index", ef_search=args.efs)
        out = pipeline.run_query(session)
        print(f"queried {out['queries']} submaps")
    elif cmd == "loops":
        apply_overrides(cfg, "retrieval", tau_s=args.tau_s, top_k=args.topk,
                        rho=args.rho)
        out = pipeline.run_loops(session)
        print(f"accepted {out['edges']} loop edges")
    elif cmd == "optimize":
        apply_overrides(cfg, "optimizer", max_iters=args.max_iters,
                        tol=args.tol, huber=args.huber)
        out = pipeline.run_optimize(session)
        print(f"optimized in {out['iterations']} iterations "
              f"(cost {out['initial_cost']:.6g} -> {out['final_cost']:.6g})")
    elif cmd == "eval":
        apply_overrides(cfg, "eval", align=args.align, max_dt=args.max_dt)
        out = pipeline.run_eval(session, args.gt, args.est)
        if "ate_rmse_odometry" in out:
            print(f"ATE_RMSE_ODOMETRY {out['ate_rmse_odometry']:.6f}")
        print(f"ATE_RMSE {out['ate_rmse']:.6f}")
    elif cmd == "render":
        out = pipeline.run_render(session, args.hillshade, args.colormap)
        print(f"wrote {out['file']}")
    elif cmd == "synth":
        spec = synthetic.load_scene_spec(args.scene) if args.scene else None
        scene = synthetic.generate(spec, seed=cfg.seed)
        files = synthetic.write_scene(scene, args.out)
        print(f"wrote scene to {args.out} "
              f"({len(scene.submaps)} submaps, manifest {files['manifest'].name})")
    elif cmd == "run":
        pipeline.run_ingest(session, args.manifest)
        pipeline.run_dem(session)
        pipeline.run_embed(session)
        pipeline.run_index(session)
        pipeline.run_query(session)
        pipeline.run_loops(session)
        out = pipeline.run_optimize(session)
        print(f"pipeline complete: {out['iterations']} optimizer iterations")
        if args.gt:
            rep = pipeline.run_eval(session, args.gt)
            if "ate_rmse_odometry" in rep:
                print(f"ATE_RMSE_ODOMETRY {rep['ate_rmse_odometry']:.6f}")
            print(f"ATE_RMSE {rep['ate_rmse']:.6f}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {cmd}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (UserInputError, ConfigError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DemSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
