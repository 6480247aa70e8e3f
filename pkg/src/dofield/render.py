"""Differentiable volume rendering, coarse/fine sampling and the training loop."""

import math
import os
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import kernels
from .chain import CameraModel, camera_rays
from .curriculum import Dataset, batch_iterator, load_dataset
from .field import (
    FieldParams,
    field_forward,
    init_field,
    normalize_configs,
    normalize_coords,
    save_checkpoint,
)


class TrainingError(RuntimeError):
    """Training diverged or could not persist its outputs."""


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    background: float = 1.0
    stratified: bool = True

    def __post_init__(self):
        if self.n_coarse < 2 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 2 and n_fine >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-5
    steps: int = 1_320_000
    batch_size: int = 15
    rays_per_image: int = 10240
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    use_fine: bool = True
    lr_final: float = None  # cosine decay target; None keeps lr constant

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1 or self.rays_per_image < 1:
            raise ValueError("training settings must be positive")


class RayBatch(NamedTuple):
    origins: np.ndarray
    directions: np.ndarray
    bounds: np.ndarray  # [m, 2]
    targets: np.ndarray


# --- sampling ---------------------------------------------------------------

def stratified_sample(t_near, t_far, n, rng=None, stratified=True):
    """Depths per ray: one uniform draw in each of ``n`` equal bins, or the bin midpoints.

    Returns ``(t [R, n], edges [R, n + 1])``.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    frac = np.arange(n + 1) / n
    edges = t_near[:, None] + (t_far - t_near)[:, None] * frac[None, :]
    if stratified:
        u = rng.random((len(t_near), n))
    else:
        u = np.full((len(t_near), n), 0.5)
    t = edges[:, :-1] + (edges[:, 1:] - edges[:, :-1]) * u
    t = np.minimum(t, np.nextafter(edges[:, 1:], -np.inf))  # stay inside the bin
    return t, edges


def deltas(t, t_far):
    """Spacing between samples; the last sample extends to ``t_far``."""
    t = np.asarray(t, dtype=np.float64)
    d = np.empty_like(t)
    d[:, :-1] = t[:, 1:] - t[:, :-1]
    d[:, -1] = np.asarray(t_far, dtype=np.float64).reshape(-1) - t[:, -1]
    return d


def hierarchical_resample(weights, edges, n_fine, rng=None, stratified=True):
    """Fine depths drawn from the piecewise-constant PDF of the coarse weights.

    Falls back to uniform over the ray when the weights sum below 1e-6.
    """
    w = np.ascontiguousarray(weights, dtype=np.float64)
    e = np.ascontiguousarray(edges, dtype=np.float64)
    if n_fine == 0:
        return np.empty((w.shape[0], 0))
    if stratified:
        u = rng.random((w.shape[0], n_fine))
    else:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (w.shape[0], n_fine))
    return np.sort(kernels.sample_pdf(w, e, np.ascontiguousarray(u)), axis=1)


def merge_depths(t_coarse, t_fine, t_far):
    """Sorted union of both depth sets, nudged so every spacing is positive."""
    t = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    for i in range(1, t.shape[1]):
        t[:, i] = np.maximum(t[:, i], np.nextafter(t[:, i - 1], np.inf))
    limit = np.nextafter(np.asarray(t_far, dtype=np.float64).reshape(-1), -np.inf)
    if np.any(t[:, -1] > limit):
        raise ValueError("merged depths reach the far bound")
    return t


# --- compositing ------------------------------------------------------------

def composite(sigma, delta, color=None, background=1.0):
    """Composite densities along rays (fused kernel with a hand-written backward).

    ``sigma`` is a Tensor [R, N]; ``delta`` and ``color`` are arrays.
    ``color`` defaults to black. Returns ``(pixel Tensor [R], weights, trans)``;
    ``trans`` has N + 1 columns, the last being the transmittance past the ray.
    """
    sigma = ad.as_tensor(sigma)
    dt = sigma.data.dtype
    delta = np.ascontiguousarray(delta, dtype=dt)
    if delta.shape != sigma.shape:
        raise ad.ShapeError(f"composite: sigma {sigma.shape} vs delta {delta.shape}")
    if np.any(delta <= 0):
        raise ValueError("composite: sample spacing must be positive")
    color = np.zeros_like(delta) if color is None else np.ascontiguousarray(color, dtype=dt)
    pixel, weights, trans = kernels.composite_forward(
        np.ascontiguousarray(sigma.data), delta, color, float(background))

    def bw(g):
        gs, _ = kernels.composite_backward(np.ascontiguousarray(g, dtype=dt), delta, color,
                                           float(background), weights, trans)
        return (gs,)

    return ad.record(pixel, (sigma,), bw), weights, trans


def composite_reference(sigma, delta, color=None, background=1.0):
    """The same compositing built from autodiff primitives; used to cross-check the fused op."""
    sigma = ad.as_tensor(sigma)
    delta = np.asarray(delta, dtype=sigma.data.dtype)
    if np.any(delta <= 0):
        raise ValueError("composite: sample spacing must be positive")
    s = ad.mul(sigma, delta)
    acc = ad.cumsum(s, axis=1)
    R, N = sigma.shape
    zero = ad.Tensor(np.zeros((R, 1)))
    before = ad.concat([zero, ad.slice_(acc, (slice(None), slice(0, N - 1)))], axis=1)
    trans = ad.exp(ad.neg(before))
    weights = ad.mul(trans, ad.sub(1.0, ad.exp(ad.neg(s))))
    t_end = ad.exp(ad.neg(ad.slice_(acc, (slice(None), N - 1))))
    pixel = ad.mul(t_end, background)
    if color is not None:
        pixel = ad.add(pixel, ad.sum_(ad.mul(weights, np.asarray(color)), axis=1))
    return pixel


def photometric_loss(rendered, target):
    rendered = ad.as_tensor(rendered)
    target = np.asarray(target, dtype=rendered.data.dtype)
    if rendered.shape != target.shape:
        raise ad.ShapeError(f"photometric_loss: {rendered.shape} vs {target.shape}")
    err = ad.sub(rendered, target)
    return ad.mean(ad.mul(err, err))


# --- rays -------------------------------------------------------------------

def ray_box(origins, dirs, lo, hi):
    """Slab test. Returns (t_enter, t_exit, hit) with t_enter clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax, tmax > tmin + 1e-9


def render_rays(net, fc, origins, dirs, t_near, t_far, configs_n, config_index, t):
    """Densities at depths ``t`` [R, n] along the rays (Tensor [R, n])."""
    R, n = t.shape
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    xn, _ = normalize_coords(pts.reshape(-1, 3), fc)
    sigma = field_forward(net, fc, xn, configs_n, True, config_index=np.repeat(config_index, n))
    return ad.reshape(sigma, (R, n))


def render_pixels(params, origins, dirs, t_near, t_far, configs, config_index, rc, rng=None,
                  use_fine=True):
    """Render coarse and fine pixels for a set of rays (no gradients)."""
    fc = params.config
    cfg_n = normalize_configs(configs, fc)
    t_c, edges = stratified_sample(t_near, t_far, rc.n_coarse, rng, rc.stratified)
    sig_c = render_rays(params.coarse, fc, origins, dirs, t_near, t_far, cfg_n, config_index, t_c)
    pix_c, w_c, _ = composite(sig_c, deltas(t_c, t_far), None, rc.background)
    if not use_fine:
        return pix_c.data, None
    t_f = hierarchical_resample(w_c, edges, rc.n_fine, rng, rc.stratified)
    t_all = merge_depths(t_c, t_f, t_far)
    sig_f = render_rays(params.fine, fc, origins, dirs, t_near, t_far, cfg_n, config_index, t_all)
    pix_f, _, _ = composite(sig_f, deltas(t_all, t_far), None, rc.background)
    return pix_c.data, pix_f.data


# --- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: FieldParams
    losses: list = field(default_factory=list)  # (step, coarse, fine)
    seconds: float = 0.0


class _RayTable:
    """Per-sample ray origins/directions and box-clipped bounds, computed once."""

    def __init__(self, dataset, fc):
        cam = dataset.manifest.camera
        lo, hi = np.asarray(fc.coord_lo), np.asarray(fc.coord_hi)
        S = len(dataset.poses)
        P = cam.image_width * cam.image_height
        self.origins = np.empty((S, 3))
        self.dirs = np.empty((S, P, 3))
        self.bounds = np.empty((S, P, 2))
        self.hit = np.empty((S, P), dtype=bool)
        for s in range(S):
            c = CameraModel(cam.focal_length, cam.image_width, cam.image_height,
                            dataset.poses[s], cam.near, cam.far)
            o, d = camera_rays(c)
            tn, tf, hit = ray_box(o, d, lo, hi)
            self.origins[s] = o[0]
            self.dirs[s] = d
            self.bounds[s, :, 0] = np.maximum(tn, cam.near)
            self.bounds[s, :, 1] = np.minimum(tf, cam.far)
            self.hit[s] = hit & (self.bounds[s, :, 1] > self.bounds[s, :, 0] + 1e-6)


def _lr_at(tc, step):
    if tc.lr_final is None or tc.steps <= 1:
        return tc.lr
    frac = step / (tc.steps - 1)
    return tc.lr_final + 0.5 * (tc.lr - tc.lr_final) * (1.0 + math.cos(math.pi * frac))


def _batches(dataset, tc):
    epoch = 0
    while True:
        yield from batch_iterator(dataset, tc.batch_size, tc.rays_per_image, [tc.seed, epoch])
        epoch += 1


def train_step(params, table, dataset, batch, rc, tc, rng, adam, step):
    """One optimization step on both networks. Returns (coarse loss, fine loss)."""
    fc = params.config
    sid = np.repeat(batch.sample_ids, batch.pixels.shape[1])
    pix = batch.pixels.reshape(-1)
    targets = dataset.images[sid, pix]
    hit = table.hit[sid, pix]
    n_total = len(pix)
    sid, pix, tgt = sid[hit], pix[hit], targets[hit]
    # rays that miss the box render the background; they add a constant to the loss
    miss_err = float(np.sum((rc.background - targets[~hit]) ** 2))
    uniq, cidx = np.unique(sid, return_inverse=True)
    cfg_n = normalize_configs(dataset.configs[uniq], fc)
    o = table.origins[sid]
    d = table.dirs[sid, pix]
    tn, tf = table.bounds[sid, pix, 0], table.bounds[sid, pix, 1]

    nets = {}
    for which in ("coarse", "fine") if tc.use_fine else ("coarse",):
        nets[which] = {k: ad.Tensor(v, requires_grad=True)
                       for k, v in getattr(params, which).items()}
    with ad.Tape() as tape:
        t_c, edges = stratified_sample(tn, tf, rc.n_coarse, rng, rc.stratified)
        sig_c = render_rays(nets["coarse"], fc, o, d, tn, tf, cfg_n, cidx, t_c)
        pix_c, w_c, _ = composite(sig_c, deltas(t_c, tf), None, rc.background)
        err_c = ad.sub(pix_c, tgt)
        loss_c = ad.mul(ad.sum_(ad.mul(err_c, err_c)), 1.0 / n_total)
        loss = loss_c
        loss_f = None
        if tc.use_fine:
            t_f = hierarchical_resample(w_c, edges, rc.n_fine, rng, rc.stratified)
            t_all = merge_depths(t_c, t_f, tf)
            sig_f = render_rays(nets["fine"], fc, o, d, tn, tf, cfg_n, cidx, t_all)
            pix_f, _, _ = composite(sig_f, deltas(t_all, tf), None, rc.background)
            err_f = ad.sub(pix_f, tgt)
            loss_f = ad.mul(ad.sum_(ad.mul(err_f, err_f)), 1.0 / n_total)
            loss = ad.add(loss_c, loss_f)
    lc = float(loss_c.data) + miss_err / n_total
    lf = float(loss_f.data) + miss_err / n_total if loss_f is not None else float("nan")
    if not np.isfinite(float(loss.data)):
        raise TrainingError(f"non-finite loss at step {step} (batch samples {batch.sample_ids.tolist()})")
    tape.backward(loss)
    adam.lr = _lr_at(tc, step)
    flat_p, flat_g = {}, {}
    for which, net in nets.items():
        for k, t in net.items():
            flat_p[f"{which}/{k}"] = getattr(params, which)[k]
            flat_g[f"{which}/{k}"] = t.grad
    ad.adam_step(flat_p, flat_g, adam)
    return lc, lf


def train(dataset, field_config, render_config, train_config, out_dir=None, params=None,
          log=None):
    """Fit coarse and fine fields to a silhouette dataset.

    With ``out_dir`` the loss log (``loss.tsv``) and checkpoints
    (``ckpt_NNNNNNN.bin`` at the cadence plus ``final.bin``) are written there.
    """
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    tc, rc = train_config, render_config
    npix = dataset.images.shape[1]
    if tc.rays_per_image > npix:
        raise ValueError(f"rays_per_image {tc.rays_per_image} exceeds {npix} pixels")
    if params is None:
        params = init_field(field_config, tc.seed)
    table = _RayTable(dataset, params.config)
    adam = ad.AdamState(lr=tc.lr)
    result = TrainResult(params)
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss.tsv"), "a", encoding="ascii")
    t0 = time.time()
    try:
        batches = _batches(dataset, tc)
        for step in range(tc.steps):
            batch = next(batches)
            rng = np.random.default_rng([tc.seed, 1, step])
            lc, lf = train_step(params, table, dataset, batch, rc, tc, rng, adam, step)
            result.losses.append((step, lc, lf))
            if log_fh is not None:
                log_fh.write(f"{step}\t{lc:.9g}\t{lf:.9g}\n")
            if log is not None:
                log(step, lc, lf)
            if out_dir is not None and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                _checkpoint(os.path.join(out_dir, f"ckpt_{step + 1:07d}.bin"), params, step + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    params.meta["steps"] = tc.steps
    if out_dir is not None:
        _checkpoint(os.path.join(out_dir, "final.bin"), params, tc.steps)
    result.seconds = time.time() - t0
    return result


def _checkpoint(path, params, step):
    try:
        save_checkpoint(path, params, {"steps": step})
    except OSError as exc:
        raise TrainingError(str(exc)) from exc
