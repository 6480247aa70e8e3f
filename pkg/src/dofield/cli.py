"""Command-line entry point: ``dofield <command> [options]``.

Exit status: 0 on success, 1 for usage errors, 2 for runtime failures.
Every command writes under ``--out`` and stores the resolved run config
there as ``run_config.json``.
"""

import argparse
import contextlib
import os
import sys

import numpy as np

from . import presets


class UsageError(Exception):
    pass


def _common(p, needs_out=True):
    g = p.add_argument_group("configuration")
    g.add_argument("--preset", choices=sorted(presets.PRESETS), help="start from a shipped preset")
    g.add_argument("--config", metavar="PATH", help="JSON run config merged over the preset")
    g.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override one config entry, e.g. train.steps=500 (repeatable)")
    g.add_argument("--out", metavar="DIR", required=needs_out, help="output directory")
    g.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1: deterministic)")


def _model_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", metavar="PATH", help="trained checkpoint (dofield_ckpt_v1)")
    src.add_argument("--oracle", action="store_true", help="use the analytic arm instead of a checkpoint")


def _vector(text, n, flag):
    try:
        v = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{flag}: expected {n} numbers, got {text!r}") from None
    if len(v) != n:
        raise UsageError(f"{flag}: expected {n} numbers, got {len(v)}")
    return np.array(v)


def build_parser():
    ap = argparse.ArgumentParser(prog="dofield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a curriculum silhouette dataset")
    _common(p)

    p = sub.add_parser("train", help="train the coarse and fine fields on a dataset")
    _common(p)
    p.add_argument("--dataset", metavar="DIR", required=True, help="dataset directory from gen-data")

    p = sub.add_parser("query", help="export the field at one config as a PLY cloud and mesh")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="trained checkpoint")
    p.add_argument("--theta", metavar="VALUES", required=True, help="joint values, comma separated")
    p.add_argument("--pitch", type=float, default=None, help="grid spacing in meters")
    p.add_argument("--isolevel", type=float, default=None, help="alpha threshold (default from config)")
    p.add_argument("--mesh", action="store_true", help="also write a marching-cubes mesh")

    p = sub.add_parser("eval", help="compare a checkpoint with the analytic arm on held-out configs")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="trained checkpoint")
    p.add_argument("--n-test", type=int, default=None, help="number of held-out configs")

    p = sub.add_parser("ik", help="move the arm to touch a sphere")
    _common(p)
    _model_args(p)
    p.add_argument("--target", metavar="X,Y,Z", required=True, help="sphere center in meters")
    p.add_argument("--radius", type=float, required=True, help="sphere radius in meters")
    p.add_argument("--start", metavar="VALUES", default=None, help="initial joint values")

    p = sub.add_parser("plan", help="RRT between two configs around a spherical obstacle")
    _common(p)
    _model_args(p)
    p.add_argument("--start", metavar="VALUES", required=True, help="start joint values")
    p.add_argument("--goal", metavar="VALUES", required=True, help="goal joint values")
    p.add_argument("--obstacle", metavar="X,Y,Z", required=True, help="obstacle center in meters")
    p.add_argument("--radius", type=float, required=True, help="obstacle radius in meters")
    return ap


def _resolve(args):
    if args.preset is None and args.config is None:
        raise UsageError("give --preset or --config")
    try:
        cfg = presets.resolve(args.preset, args.config, args.overrides)
    except presets.ConfigError as exc:
        raise UsageError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w", encoding="utf-8") as fh:
        fh.write(presets.to_json(cfg))
    return cfg


def _need_file(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")


def cmd_gen_data(args, cfg):
    from .curriculum import generate_dataset

    spec = presets.chain_from(cfg)
    m = generate_dataset(spec, presets.camera_from(cfg, spec), presets.plan_from(cfg, spec),
                         cfg["seed"], os.path.join(args.out, "dataset"))
    print(f"wrote {len(m.samples)} samples to {m.root}")


def cmd_train(args, cfg):
    from .curriculum import load_dataset
    from .render import train

    if not os.path.isfile(os.path.join(args.dataset, "manifest")):
        raise UsageError(f"--dataset: no manifest in {args.dataset}")
    ds = load_dataset(args.dataset)
    spec = ds.manifest.spec
    tc = presets.train_config(cfg)
    every = max(1, tc.steps // 20)

    def log(step, lc, lf):
        if step % every == 0 or step == tc.steps - 1:
            print(f"step {step} coarse {lc:.5f} fine {lf:.5f}", flush=True)

    res = train(ds, presets.field_config(cfg, spec), presets.render_config(cfg), tc,
                out_dir=args.out, log=log)
    print(f"trained {tc.steps} steps in {res.seconds:.1f}s; checkpoint {os.path.join(args.out, 'final.bin')}")


def _load_params(path):
    from .field import load_checkpoint

    _need_file(path, "--checkpoint")
    return load_checkpoint(path)


def cmd_query(args, cfg):
    from .chain import config_values
    from .geometry import write_ply
    from .selfmodel import GridSpec, extract_point_cloud, marching_cubes, query_grid

    spec = presets.chain_from(cfg)
    params = _load_params(args.checkpoint)
    theta = config_values(spec, _vector(args.theta, spec.num_dofs, "--theta"))
    fc = params.config
    pitch = args.pitch or min(spec.link_radii) / 3.0
    grid = GridSpec.with_pitch(fc.coord_lo, fc.coord_hi, pitch)
    iso = cfg["eval"]["isolevel"] if args.isolevel is None else args.isolevel
    qg = query_grid(params, theta, grid)
    cloud = extract_point_cloud(qg, iso)
    write_ply(os.path.join(args.out, "cloud.ply"), cloud=cloud)
    print(f"cloud: {len(cloud)} points")
    if args.mesh:
        mesh = marching_cubes(qg, iso)
        write_ply(os.path.join(args.out, "mesh.ply"), mesh=mesh)
        print(f"mesh: {len(mesh.triangles)} triangles")


def cmd_eval(args, cfg):
    from .selfmodel import evaluate, test_configs

    spec = presets.chain_from(cfg)
    params = _load_params(args.checkpoint)
    e = cfg["eval"]
    n = e["n_test"] if args.n_test is None else args.n_test
    if n < 1:
        raise UsageError("--n-test must be >= 1")
    report = evaluate(params, spec, test_configs(spec, n, e["test_seed"]), None, e["isolevel"],
                      e["n_surface"], cfg["seed"])
    report.write(os.path.join(args.out, "metrics.txt"))
    print(f"mean Chamfer {report.mean_chamfer_m:.4f} m ({report.mean_chamfer_pct:.2f}% of "
          f"{report.workspace_min_dim:.3f} m), mean IoU {report.mean_iou:.3f}")
    for f in report.flagged:
        print(f"flag: {f}")
    if report.flagged and not report.results:
        raise RuntimeError("checkpoint unusable: " + "; ".join(report.flagged))


def _model(args, cfg, spec):
    from .planner import LearnedField, OracleField

    if args.oracle:
        p = cfg["planner"]
        return OracleField(spec, p["oracle_margin"], p["oracle_falloff"])
    return LearnedField(_load_params(args.checkpoint))


def cmd_ik(args, cfg):
    from .planner import SphereTarget, solve_ik

    spec = presets.chain_from(cfg)
    model = _model(args, cfg, spec)
    if args.radius <= 0:
        raise UsageError("--radius must be positive")
    start = None if args.start is None else tuple(_vector(args.start, spec.num_dofs, "--start"))
    p = cfg["planner"]
    target = SphereTarget(tuple(_vector(args.target, 3, "--target")), args.radius,
                          p["n_surface"], p["n_volume"], cfg["seed"])
    traj = solve_ik(model, target, presets.pgd_config(cfg, start))
    traj.write(os.path.join(args.out, "trajectory.txt"))
    traj.write_ply(os.path.join(args.out, "trajectory.ply"), spec)
    print(f"{traj.reason} after {len(traj.configs) - 1} steps ({traj.attempts} attempts); "
          f"final loss {traj.losses[-1]:.4f}")


def cmd_plan(args, cfg):
    from .planner import (
        PlanningError,
        SphereTarget,
        analytic_validity,
        field_validity,
        rrt_plan,
        sample_target,
        swept_margin,
    )

    spec = presets.chain_from(cfg)
    if args.radius <= 0:
        raise UsageError("--radius must be positive")
    center = _vector(args.obstacle, 3, "--obstacle")
    start = _vector(args.start, spec.num_dofs, "--start")
    goal = _vector(args.goal, spec.num_dofs, "--goal")
    p = cfg["planner"]
    rc = presets.rrt_config(cfg)
    margin = swept_margin(spec, rc.edge_resolution)
    if args.oracle:
        valid = analytic_validity(spec, center, args.radius, margin)
    else:
        # inflate the sampled obstacle by the same swept margin
        model = _model(args, cfg, spec)
        _, vol = sample_target(SphereTarget(tuple(center), args.radius + margin,
                                            p["n_surface"], p["n_volume"], cfg["seed"]))
        valid = field_validity(model, vol, p["tau"])
    try:
        res = rrt_plan(valid, start, goal, spec.limits, rc)
    except PlanningError as exc:
        raise UsageError(str(exc)) from None
    traj = res.as_trajectory()
    traj.write(os.path.join(args.out, "trajectory.txt"))
    if res.success:
        traj.write_ply(os.path.join(args.out, "trajectory.ply"), spec)
        print(f"path with {len(res.path)} waypoints after {res.iterations} iterations")
    else:
        print(f"no path within {res.iterations} iterations")
        raise RuntimeError("planning failed")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "query": cmd_query,
            "eval": cmd_eval, "ik": cmd_ik, "plan": cmd_plan}


def _threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = _resolve(args)
        with _threads(args.threads):
            COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
