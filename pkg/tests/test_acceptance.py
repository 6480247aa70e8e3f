"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trained 3-DOF model used by criteria 5 and 7 is cached in pytest's
cache directory, keyed on the run config and the package sources, so only
the first run pays for training (about 20 minutes on one core).
"""

import filecmp
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import dofield
from dofield import autodiff as ad
from dofield import cli, kernels, presets
from dofield.chain import (
    camera_rays,
    capsule_sphere_collision,
    chain_sdf,
    default_camera,
    forward_kinematics,
    render_silhouette,
)
from dofield.curriculum import build_curriculum, generate_dataset, load_dataset, read_manifest
from dofield.field import field_forward, init_field, load_checkpoint, normalize_configs
from dofield.planner import (
    LearnedField,
    OracleField,
    RRTConfig,
    SphereTarget,
    analytic_validity,
    config_space_query,
    edge_valid,
    path_collisions,
    rrt_plan,
    sample_target,
    solve_ik,
    swept_margin,
)
from dofield.render import (
    composite,
    deltas,
    hierarchical_resample,
    merge_depths,
    ray_box,
    render_rays,
    stratified_sample,
    train,
)
from dofield.selfmodel import (
    GridSpec,
    QueryGrid,
    chamfer_l2,
    evaluate,
    marching_cubes,
    test_configs as held_out_configs,
)

# --- shared trained model ---------------------------------------------------


def _source_digest(cfg):
    h = hashlib.sha256(presets.to_json(cfg).encode())
    root = Path(dofield.__file__).parent
    for p in sorted(root.glob("*.py")) + sorted(root.glob("*.pyx")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk3dof_model(request):
    """(spec, params, info) for the desk3dof preset, trained once and cached."""
    cfg = presets.preset("desk3dof")
    spec = presets.chain_from(cfg)
    root = request.config.cache.mkdir("dofield-desk3dof") / _source_digest(cfg)
    ckpt, info_path = root / "final.bin", root / "info.json"
    if not (ckpt.exists() and info_path.exists()):
        root.mkdir(parents=True, exist_ok=True)
        manifest = generate_dataset(spec, presets.camera_from(cfg, spec), presets.plan_from(cfg, spec),
                                    cfg["seed"], str(root / "dataset"))
        ds = load_dataset(manifest.root)
        res = train(ds, presets.field_config(cfg, spec), presets.render_config(cfg),
                    presets.train_config(cfg), out_dir=str(root))
        info = {"seconds": res.seconds, "images": len(manifest.samples),
                "image_size": [manifest.camera.image_width, manifest.camera.image_height],
                "steps": cfg["train"]["steps"]}
        info_path.write_text(json.dumps(info))
    return spec, load_checkpoint(str(ckpt)), json.loads(info_path.read_text())


# --- 1: gradients -----------------------------------------------------------


def _directional_errors(loss_fn, leaves, dtype, n_probes, rng, h=1e-5):
    """Worst relative error of autodiff directional derivatives against float64 central differences.

    ``loss_fn(values, dtype)`` builds the scalar loss from a dict of arrays
    (or Tensors). Probes are random unit directions over every leaf. ReLU is
    the only nonsmooth op, so every ReLU sign pattern is recorded at the
    three evaluation points; a direction whose difference segment crosses a
    kink is not a valid reference and is redrawn. Returns (worst, redraws).
    """
    vals = {k: np.asarray(v, dtype=dtype) for k, v in leaves.items()}
    with ad.precision(dtype):
        ts = {k: ad.Tensor(v, requires_grad=True) for k, v in vals.items()}
        with ad.Tape() as tape:
            loss = loss_fn(ts, dtype)
        tape.backward(loss)
    grads = {k: t.grad.astype(np.float64) for k, t in ts.items()}
    base = {k: v.astype(np.float64) for k, v in vals.items()}

    relu = ad.relu

    def evaluate(point):
        signs = []

        def spy(a):
            signs.append(ad.as_tensor(a).data > 0)
            return relu(a)

        ad.relu = spy
        try:
            return loss_fn(point, np.float64).item(), signs
        finally:
            ad.relu = relu

    _, s0 = evaluate(base)
    worst, redraws = 0.0, 0
    for _ in range(n_probes):
        while True:
            v = {k: rng.normal(size=b.shape) for k, b in base.items()}
            norm = math.sqrt(sum(float((x ** 2).sum()) for x in v.values()))
            fp, sp = evaluate({k: base[k] + h * v[k] / norm for k in base})
            fm, sm = evaluate({k: base[k] - h * v[k] / norm for k in base})
            if all(np.array_equal(x, y) and np.array_equal(x, z) for x, y, z in zip(s0, sp, sm)):
                break
            redraws += 1
        an = sum(float((grads[k] * v[k]).sum()) for k in base) / norm
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-30))
    return worst, redraws


def _generic_point(net, rng):
    """Freshly initialized biases are all zero, which puts idle units exactly on a ReLU kink."""
    out = dict(net)
    for k, v in net.items():
        if k.endswith(".b"):
            out[k] = v + rng.uniform(-0.1, 0.1, v.shape)
    return out


def _field_graph(fc, rng):
    x = rng.uniform(-1, 1, (256, 3))
    t = rng.uniform(-1, 1, (256, fc.k))
    y = rng.uniform(0, 2, 256)
    with ad.precision(np.float64):
        leaves = _generic_point(init_field(fc, 0).coarse, rng)
    leaves["input.x"], leaves["input.theta"] = x, t

    def loss(v, dtype):
        with ad.precision(dtype):
            net = {k: a for k, a in v.items() if not k.startswith("input.")}
            s = field_forward(net, fc, v["input.x"], v["input.theta"])
            e = ad.sub(s, y)
            return ad.mean(ad.mul(e, e))

    return leaves, loss


def _render_graph(cfg, spec, fc, rng):
    rc = presets.render_config(cfg)
    cam = default_camera(spec, 64, 64)
    o, d = camera_rays(cam)
    tn, tf, hit = ray_box(o, d, np.asarray(fc.coord_lo), np.asarray(fc.coord_hi))
    idx = rng.choice(np.nonzero(hit)[0], 48, replace=False)
    o, d, tn, tf = o[idx], d[idx], tn[idx], tf[idx]
    target = (rng.random(48) < 0.5).astype(np.float64)
    q = rng.uniform(spec.limits[:, 0], spec.limits[:, 1])
    q[0] = 0.0  # training always sees the base folded away
    cfg_n = normalize_configs(q[None, :], fc)
    cidx = np.zeros(48, dtype=np.int64)
    with ad.precision(np.float64):
        params = init_field(fc, 1)
    params.coarse = _generic_point(params.coarse, rng)
    params.fine = _generic_point(params.fine, rng)
    t_c, edges = stratified_sample(tn, tf, rc.n_coarse, rng)
    # fine depths are drawn once so that both sides of each difference see the same samples
    sig0 = render_rays(params.coarse, fc, o, d, tn, tf, cfg_n, cidx, t_c)
    _, w0, _ = composite(sig0, deltas(t_c, tf))
    t_all = merge_depths(t_c, hierarchical_resample(w0, edges, rc.n_fine, rng), tf)
    leaves = {f"c/{k}": v for k, v in params.coarse.items()}
    leaves.update({f"f/{k}": v for k, v in params.fine.items()})

    def loss(v, dtype):
        with ad.precision(dtype):
            total = None
            for tag, t in (("c/", t_c), ("f/", t_all)):
                net = {k[2:]: a for k, a in v.items() if k.startswith(tag)}
                pix, _, _ = composite(render_rays(net, fc, o, d, tn, tf, cfg_n, cidx, t), deltas(t, tf))
                e = ad.sub(pix, target)
                mse = ad.mean(ad.mul(e, e))
                total = mse if total is None else ad.add(total, mse)
            return total

    return leaves, loss


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.time()
    cfg = presets.preset("desk3dof")
    spec = presets.chain_from(cfg)
    fc = presets.field_config(cfg, spec)
    rng = np.random.default_rng(2024)
    results = {}
    for name, (leaves, fn) in (("field", _field_graph(fc, rng)), ("render+mse", _render_graph(cfg, spec, fc, rng))):
        for dtype in (np.float32, np.float64):
            results[(name, dtype.__name__)] = _directional_errors(fn, leaves, dtype, 100, rng)
    elapsed = time.time() - t0
    ok = all(err < (1e-3 if dt == "float32" else 1e-6) for (_, dt), (err, _) in results.items()) and elapsed < 60
    detail = ", ".join(f"{n}/{dt} {e:.1e}" for (n, dt), (e, _) in results.items())
    retries = sum(r for _, r in results.values())
    criterion(1, ok, f"max rel. error over 100 probes each: {detail}; {retries} kink-crossing probes redrawn; {elapsed:.0f}s")


# --- 2: rendering invariants ------------------------------------------------


def test_criterion_02_rendering_invariants(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2)
    R, N = 10_000, 64
    sigma = rng.exponential(1.0, (R, N)) * rng.choice([0.0, 0.1, 10.0, 1000.0], size=(R, 1))
    sigma[rng.random((R, N)) < 0.3] = 0.0
    delta = rng.uniform(1e-4, 0.1, (R, N))
    checks = {}
    for name, m in kernels.backends().items():
        pix, w, T = m.composite_forward(sigma, delta, np.zeros_like(sigma), 1.0)
        checks[f"{name}: T starts at 1"] = bool(np.all(T[:, 0] == 1.0))
        checks[f"{name}: T non-increasing"] = bool(np.all(np.diff(T, axis=1) <= 0))
        checks[f"{name}: w >= 0"] = bool(np.all(w >= 0))
        checks[f"{name}: sum w <= 1"] = bool(np.all(w.sum(axis=1) <= 1.0 + 1e-12))
        empty, _, _ = m.composite_forward(np.zeros((5, N)), delta[:5], np.zeros((5, N)), 1.0)
        checks[f"{name}: empty ray == background"] = bool(np.all(empty == 1.0))
        ln2 = np.full((1, 2), math.log(2.0))
        two, _, _ = m.composite_forward(ln2, np.ones((1, 2)), np.zeros((1, 2)), 1.0)
        checks[f"{name}: ln2 case == 0.25"] = bool(two[0] == 0.25)
    bad = [k for k, v in checks.items() if not v]
    criterion(2, not bad, f"{len(checks)} checks on {R} rays x {N} samples over backends "
                          f"{sorted(kernels.backends())}; failed: {bad or 'none'}; {time.time() - t0:.1f}s")


# --- 3: base-rotation equivalence -------------------------------------------


def test_criterion_03_base_rotation_equivalence(criterion):
    t0 = time.time()
    spec = presets.chain_from(presets.preset("desk3dof"))
    rng = np.random.default_rng(3)
    matches, nonempty = 0, 0
    for _ in range(100):
        theta = rng.uniform(spec.limits[:, 0], spec.limits[:, 1])
        el = rng.uniform(5.0, 70.0)
        dist = rng.uniform(1.8, 3.0)
        yaw = rng.uniform(-math.pi, math.pi)
        cam = default_camera(spec, 64, 64, el, dist)
        c, s = math.cos(yaw), math.sin(yaw)
        Rz_yaw = np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
        cam = cam.with_pose(Rz_yaw @ cam.pose)
        c0, s0 = math.cos(theta[0]), math.sin(theta[0])
        Rz = np.array([[c0, -s0, 0, 0], [s0, c0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
        zeroed = theta.copy()
        zeroed[0] = 0.0
        a = render_silhouette(spec, theta, cam).image
        b = render_silhouette(spec, zeroed, cam.with_pose(Rz @ cam.pose)).image
        matches += bool(np.array_equal(a, b))
        nonempty += bool((a == 0).any())
    criterion(3, matches == 100 and nonempty > 90,
              f"{matches}/100 pixel-identical 64x64 pairs ({nonempty} non-empty); {time.time() - t0:.1f}s")


# --- 4: curriculum ----------------------------------------------------------


def test_criterion_04_curriculum_combinatorics(criterion, tmp_path):
    sizes_ok = all(len(build_curriculum(k)) == 2 ** (k - 1) - 1 for k in range(2, 11))
    cfg = presets.preset("desk3dof")
    spec = presets.chain_from(cfg)
    m = generate_dataset(spec, presets.camera_from(cfg, spec), presets.plan_from(cfg, spec),
                         cfg["seed"], str(tmp_path / "ds"))
    ds = load_dataset(read_manifest(m.root))
    bad = 0
    for q, subset in zip(ds.configs, ds.subsets):
        off = [i for i in range(spec.num_dofs) if i not in subset]
        bad += not (np.all(q[off] == 0.0) and q[0] == 0.0 and np.all(q[list(subset)] != 0.0))
    criterion(4, sizes_ok and bad == 0,
              f"sizes 2^(k-1)-1 for k=2..10: {sizes_ok}; {len(ds.configs)} samples scanned, {bad} violations")


# --- 5: self-model quality --------------------------------------------------


@pytest.mark.slow
def test_criterion_05_self_model_quality(criterion, desk3dof_model):
    spec, params, info = desk3dof_model
    cfg = presets.preset("desk3dof")
    e = cfg["eval"]
    t0 = time.time()
    report = evaluate(params, spec, held_out_configs(spec, 10, e["test_seed"]), None,
                      e["isolevel"], e["n_surface"], cfg["seed"])
    budget_ok = info["images"] <= 400 and info["steps"] <= 60_000 and info["image_size"] == [64, 64]
    ok = (budget_ok and not report.flagged and len(report.results) == 10
          and report.mean_chamfer_pct < 5.0 and report.mean_iou > 0.3)
    floor = np.mean([r.floor_m for r in report.results])
    criterion(5, ok, f"mean Chamfer {report.mean_chamfer_m:.4f} m = {report.mean_chamfer_pct:.2f}% of "
                     f"{report.workspace_min_dim:.3f} m (< 5%), mean IoU {report.mean_iou:.3f} (> 0.3), "
                     f"voxel floor {floor:.4f} m; {info['images']} images, {info['steps']} steps, "
                     f"train {info['seconds'] / 60:.1f} min, eval {time.time() - t0:.0f}s")


# --- 6: oracle IK -----------------------------------------------------------


def test_criterion_06_oracle_ik(criterion):
    t0 = time.time()
    cfg = presets.preset("desk3dof")
    spec = presets.chain_from(cfg)
    p = cfg["planner"]
    model = OracleField(spec, p["oracle_margin"], p["oracle_falloff"])
    pgd = presets.pgd_config(cfg)
    assert pgd.tau == 0.6 and pgd.max_iters == 500
    lim = spec.limits
    reached, steps = 0, []
    for seed in range(10):
        rng = np.random.default_rng([seed, 6])
        # a target whose surface passes within the margin of some in-limits pose is reachable
        q = rng.uniform(lim[:, 0], lim[:, 1])
        tip = forward_kinematics(spec, q)[-1].b
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = 0.05
        target = SphereTarget(tuple(tip + d * (spec.link_radii[-1] + r + 0.005)), r, seed=seed)
        surf, _ = sample_target(target)
        assert np.min(chain_sdf(spec, q, surf)) <= p["oracle_margin"]
        traj = solve_ik(model, target, pgd)
        total = len(traj.configs) - 1
        # re-check the final pose independently of the recorded loss
        reached += traj.success and model.touch_loss(traj.configs[-1], surf, 0.6)[0] <= 0
        steps.append(total)
    reach = sum(spec.link_lengths) + max(spec.link_radii)
    false_success = 0
    for seed in range(10):
        rng = np.random.default_rng([seed, 66])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = 0.05
        target = SphereTarget(tuple(d * (reach + r + 0.1 + rng.uniform(0, 1.0))), r, seed=seed)
        false_success += solve_ik(model, target, pgd).success
    criterion(6, reached >= 8 and false_success == 0,
              f"reached {reached}/10 reachable targets (tau 0.6, max {max(steps)} of 500 iterations); "
              f"{false_success}/10 unreachable reported success; {time.time() - t0:.0f}s")


# --- 7: configuration-space fidelity ----------------------------------------


@pytest.mark.slow
def test_criterion_07_config_space_fidelity(criterion, desk3dof_model):
    spec, params, _ = desk3dof_model
    center, radius = np.array([0.3, 0.0, 0.1]), 0.12
    Q = held_out_configs(spec, 1000, 7)
    exact = np.array([capsule_sphere_collision(spec, q, center, radius) for q in Q])
    _, vol = sample_target(SphereTarget(tuple(center), radius, n_volume=256, seed=0))
    learned = LearnedField(params)
    free_learned = np.array([config_space_query(learned, q, vol, 0.6) for q in Q])
    agree_learned = float(np.mean(free_learned != exact))
    analytic = OracleField(spec, margin=0.0)
    free_analytic = np.array([config_space_query(analytic, q, vol, 0.6) for q in Q])
    # the query only sees the obstacle samples: the matching ground truth is "some sample is inside the arm"
    sample_truth = np.array([np.min(chain_sdf(spec, q, vol)) <= 0.0 for q in Q])
    agree_analytic = float(np.mean(free_analytic != sample_truth))
    agree_continuous = float(np.mean(free_analytic != exact))
    criterion(7, agree_learned >= 0.95 and agree_analytic == 1.0,
              f"learned vs exact capsule-sphere {100 * agree_learned:.1f}% (>= 95%); analytic field vs "
              f"sampled-obstacle oracle {100 * agree_analytic:.1f}% (== 100%); analytic field vs "
              f"continuous test {100 * agree_continuous:.1f}% (info); collision rate {100 * exact.mean():.1f}%")


# --- 8: RRT -----------------------------------------------------------------


def test_criterion_08_rrt_validity(criterion):
    t0 = time.time()
    cfg = presets.preset("desk2dof")
    spec = presets.chain_from(cfg)
    center, radius = np.array([0.55, 0.0, 0.0]), 0.08
    base_rc = presets.rrt_config(cfg)
    margin = swept_margin(spec, base_rc.edge_resolution)
    exact = lambda q: not capsule_sphere_collision(spec, q, center, radius)
    solved, collisions, straddle = 0, 0, 0
    for seed in range(10):
        rng = np.random.default_rng([seed, 8])
        start = np.array([rng.uniform(-1.4, -0.6), rng.uniform(-0.5, 0.5)])
        goal = np.array([rng.uniform(0.6, 1.4), rng.uniform(-0.5, 0.5)])
        straddle += not edge_valid(exact, start, goal, base_rc.edge_resolution / 10)
        rc = RRTConfig(base_rc.step_size, base_rc.goal_bias, base_rc.max_iters, base_rc.edge_resolution, seed)
        res = rrt_plan(analytic_validity(spec, center, radius, margin), start, goal, spec.limits, rc)
        if res.success:
            solved += 1
            collisions += path_collisions(res.path, exact, rc.edge_resolution / 10)
    elapsed = time.time() - t0
    criterion(8, solved >= 9 and collisions == 0 and straddle == 10 and elapsed < 300,
              f"solved {solved}/10 blocked start/goal pairs ({straddle}/10 direct edges blocked); "
              f"{collisions} collisions at 10x edge resolution; {elapsed:.0f}s")


# --- 9: determinism ---------------------------------------------------------


def _tree(root):
    return sorted(os.path.relpath(os.path.join(b, f), root) for b, _, fs in os.walk(root) for f in fs)


def test_criterion_09_determinism(criterion, tmp_path):
    runs = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        assert cli.main(["gen-data", "--preset", "desk3dof", "--out", str(root / "data"), "--threads", "1"]) == 0
        assert cli.main(["train", "--preset", "desk3dof", "--out", str(root / "train"), "--threads", "1",
                         "--dataset", str(root / "data" / "dataset"), "--set", "train.steps=100"]) == 0
        runs.append(root)
    files = _tree(runs[0])
    _, mismatch, errors = filecmp.cmpfiles(runs[0], runs[1], files, shallow=False)
    rows = (runs[0] / "train" / "loss.tsv").read_text().splitlines()
    ok = files == _tree(runs[1]) and not mismatch and not errors and len(rows) == 100
    criterion(9, ok, f"{len(files)} files (dataset, loss log, checkpoint) byte-identical across two runs; "
                     f"mismatched: {mismatch or 'none'}")


# --- 10: metric oracles -----------------------------------------------------


def test_criterion_10_metric_oracles(criterion):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(5):
        a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) * 0.7 + 0.1
        dist = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        brute = 0.5 * (dist.min(1).mean() + dist.min(0).mean())
        worst = max(worst, abs(chamfer_l2(a, b) - brute))
    n, r = 41, 0.31
    spec = GridSpec((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), (n, n, n))
    sdf = np.linalg.norm(spec.points(), axis=1) - r
    grid = QueryGrid(spec, np.clip(0.5 - sdf, 0.0, 1.0))
    mesh = marching_cubes(grid, 0.5)
    diag = float(np.linalg.norm(spec.spacing))
    radial = float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - r)))
    criterion(10, worst < 1e-9 and len(mesh.triangles) > 0 and radial < 1.5 * diag,
              f"Chamfer vs brute force max |diff| {worst:.1e} (< 1e-9); sphere mesh radius error "
              f"{radial:.2e} m vs 1.5 voxel diagonals {1.5 * diag:.3f} m")
