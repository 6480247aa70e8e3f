import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dofield import autodiff as ad
from dofield import presets
from dofield.chain import default_camera, render_silhouette
from dofield.curriculum import CurriculumPlan, apply_base_rotation, generate_dataset, load_dataset
from dofield.field import init_field
from dofield.render import (
    RenderConfig,
    TrainConfig,
    TrainingError,
    composite,
    composite_reference,
    deltas,
    hierarchical_resample,
    merge_depths,
    photometric_loss,
    ray_box,
    stratified_sample,
    train,
)

LN2 = math.log(2.0)


def comp64(sigma, delta, color=None, background=1.0):
    with ad.precision(np.float64):
        pix, w, T = composite(ad.Tensor(np.atleast_2d(sigma)), np.atleast_2d(delta),
                              None if color is None else np.atleast_2d(color), background)
    return pix.data, w, T


def test_empty_ray_renders_background():
    pix, w, _ = comp64(np.zeros(8), np.full(8, 0.1), background=0.7)
    assert pix[0] == 0.7 and w.sum() == 0.0


def test_single_sample_half_opacity():
    pix, w, _ = comp64([LN2], [1.0])
    np.testing.assert_allclose(w[0], [0.5], rtol=1e-15)
    np.testing.assert_allclose(pix, [0.5], rtol=1e-15)


def test_two_samples_product_form():
    pix, w, T = comp64([LN2, 2 * LN2], [1.0, 0.5])
    np.testing.assert_allclose(T[0, :2], [1.0, 0.5], rtol=1e-15)
    np.testing.assert_allclose(w[0], [0.5, 0.25], rtol=1e-15)
    np.testing.assert_allclose(pix, [0.25], rtol=1e-15)


def scalar_composite(sigma, delta, color, bg):
    T, pix = 1.0, 0.0
    for s, d, c in zip(sigma, delta, color):
        a = 1.0 - math.exp(-s * d)
        pix += T * a * c
        T *= 1.0 - a
    return pix + T * bg


def test_random_ray_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    sigma, delta, color = rng.exponential(2.0, 64), rng.uniform(0.005, 0.05, 64), rng.random(64)
    pix, _, _ = comp64(sigma, delta, color, 1.0)
    assert abs(pix[0] - scalar_composite(sigma, delta, color, 1.0)) < 1e-6


def test_nonpositive_delta_rejected():
    with pytest.raises(ValueError):
        comp64([1.0, 1.0], [0.1, 0.0])
    with pytest.raises(ValueError):
        with ad.precision(np.float64):
            composite_reference(ad.Tensor([[1.0]]), [[-0.1]])


@settings(max_examples=60)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=20), st.floats(0.001, 0.3))
def test_transmittance_and_weight_bounds(sig, d):
    sigma = np.array(sig)
    delta = np.full(len(sig), d)
    _, w, T = comp64(sigma, delta)
    assert T[0, 0] == 1.0
    assert np.all(np.diff(T[0]) <= 0) and np.all(T >= 0)
    total = w.sum()
    bound = 1.0 - math.exp(-float(np.sum(sigma * delta)))
    assert 0.0 <= total <= bound + 1e-12 and bound <= 1.0
    np.testing.assert_allclose(total, bound, atol=1e-12)


def test_fused_matches_primitive_route():
    rng = np.random.default_rng(1)
    sigma = rng.exponential(3.0, (5, 16))
    delta = rng.uniform(0.01, 0.1, (5, 16))
    color = rng.random((5, 16))
    target = rng.random(5)
    grads = []
    with ad.precision(np.float64):
        for fn in (lambda s: composite(s, delta, color, 0.8)[0],
                   lambda s: composite_reference(s, delta, color, 0.8)):
            s = ad.Tensor(sigma, requires_grad=True)
            with ad.Tape() as tape:
                pix = fn(s)
                loss = photometric_loss(pix, target)
            tape.backward(loss)
            grads.append((pix.data, s.grad))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-12)
    np.testing.assert_allclose(grads[0][1], grads[1][1], rtol=1e-9, atol=1e-14)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    sigma = rng.exponential(3.0, (3, 10))
    delta = rng.uniform(0.01, 0.1, (3, 10))
    target = rng.random(3)
    with ad.precision(np.float64):
        s = ad.Tensor(sigma, requires_grad=True)
        with ad.Tape() as tape:
            loss = photometric_loss(composite(s, delta)[0], target)
        tape.backward(loss)
        h = 1e-6
        for idx in np.ndindex(sigma.shape):
            up, dn = sigma.copy(), sigma.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (photometric_loss(composite(ad.Tensor(up), delta)[0], target).item()
                  - photometric_loss(composite(ad.Tensor(dn), delta)[0], target).item()) / (2 * h)
            assert abs(s.grad[idx] - fd) <= 1e-3 * abs(fd) + 1e-9


def test_stratified_midpoints_and_bins():
    t, edges = stratified_sample([0.0], [2.0], 2, stratified=False)
    np.testing.assert_array_equal(t, [[0.5, 1.5]])
    np.testing.assert_array_equal(edges, [[0.0, 1.0, 2.0]])
    rng = np.random.default_rng(3)
    t, edges = stratified_sample(np.full(1000, 0.5), np.full(1000, 2.5), 8, rng)
    assert np.all(t >= edges[:, :-1]) and np.all(t < edges[:, 1:])
    assert np.all(np.diff(t, axis=1) > 0)
    with pytest.raises(ValueError):
        stratified_sample([0.0], [1.0], 1)


def test_stratified_bin_means():
    rng = np.random.default_rng(4)
    n_draws, n = 100_000, 4
    t, _ = stratified_sample(np.zeros(n_draws), np.full(n_draws, 4.0), n, rng)
    se = 1.0 / math.sqrt(12) / math.sqrt(n_draws)
    np.testing.assert_array_less(np.abs(t.mean(axis=0) - (np.arange(n) + 0.5)), 3 * se)


def test_deltas_last_sample_reaches_far():
    d = deltas(np.array([[0.5, 1.0, 1.75]]), np.array([2.0]))
    np.testing.assert_array_equal(d, [[0.5, 0.75, 0.25]])


def test_resample_concentrated_weights():
    rng = np.random.default_rng(5)
    edges = np.linspace(0, 1, 9)[None].repeat(50, 0)
    w = np.zeros((50, 8))
    w[:, 5] = 0.7
    t = hierarchical_resample(w, edges, 32, rng)
    assert np.all((t >= 0.625) & (t <= 0.75))


@pytest.mark.parametrize("scale", [1.0, 0.0])
def test_resample_uniform_histogram(scale):
    # equal weights, and zero weights through the fallback, both give a flat histogram
    rng = np.random.default_rng(6)
    edges = np.linspace(1.0, 3.0, 5)[None].repeat(1000, 0)
    w = np.full((1000, 4), 0.2 * scale)
    t = hierarchical_resample(w, edges, 100, rng).reshape(-1)
    counts, _ = np.histogram(t, bins=10, range=(1.0, 3.0))
    p = 0.1
    se = math.sqrt(len(t) * p * (1 - p))
    np.testing.assert_array_less(np.abs(counts - len(t) * p), 3 * se)
    assert t.min() >= 1.0 and t.max() <= 3.0


def test_merge_depths_sorted_unique():
    t_c = np.array([[0.1, 0.2, 0.3]])
    t = merge_depths(t_c, np.array([[0.2, 0.2, 0.25]]), np.array([1.0]))
    assert t.shape == (1, 6) and np.all(np.diff(t) > 0)
    with pytest.raises(ValueError):
        merge_depths(t_c, np.array([[1.0]]), np.array([1.0]))


def test_photometric_loss_cases():
    assert photometric_loss(np.array([0.3, 0.4]), np.array([0.3, 0.4])).item() == 0.0
    assert photometric_loss(np.zeros(5), np.ones(5)).item() == 1.0
    rng = np.random.default_rng(7)
    a, b = rng.random(100), rng.random(100)
    with ad.precision(np.float64):
        got = photometric_loss(a, b).item()
    want = sum((x - y) ** 2 for x, y in zip(a, b)) / 100
    assert abs(got - want) < 1e-7
    with pytest.raises(ad.ShapeError):
        photometric_loss(np.zeros(3), np.zeros(4))


def test_ray_box():
    o = np.array([[-2.0, 0.0, 0.0], [-2.0, 5.0, 0.0], [0.0, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    tn, tf, hit = ray_box(o, d, -np.ones(3), np.ones(3))
    np.testing.assert_allclose(tn[[0, 2]], [1.0, 0.0])
    np.testing.assert_allclose(tf[[0, 2]], [3.0, 1.0])
    np.testing.assert_array_equal(hit, [True, False, True])


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(n_coarse=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


# --- training ---------------------------------------------------------------

TINY = ["field.trunk_width=32", "field.trunk_depth=4"]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    cfg = presets.resolve("desk2dof", None, TINY)
    spec = presets.chain_from(cfg)
    root = tmp_path_factory.mktemp("toy")
    m = generate_dataset(spec, default_camera(spec, 24, 24), CurriculumPlan.for_chain(2, 6, 4), 0, str(root))
    return spec, load_dataset(m.root), presets.field_config(cfg, spec)


def tiny_train(toy, steps, use_fine=True, dataset=None, **kw):
    spec, ds, fc = toy
    tc = TrainConfig(lr=2e-3, steps=steps, batch_size=4, rays_per_image=64, seed=0, use_fine=use_fine)
    return train(ds if dataset is None else dataset, fc, RenderConfig(16, 16), tc, **kw)


def test_training_reduces_loss(toy, tmp_path):
    res = tiny_train(toy, 200, out_dir=str(tmp_path))
    first, last = res.losses[0], res.losses[-1]
    assert last[1] + last[2] < first[1] + first[2]
    rows = (tmp_path / "loss.tsv").read_text().splitlines()
    assert len(rows) == 200 and rows[0].startswith("0\t")
    assert (tmp_path / "final.bin").exists()


def test_training_is_bit_reproducible(toy):
    a = tiny_train(toy, 100)
    b = tiny_train(toy, 100)
    assert a.losses == b.losses
    for k in a.params.fine:
        np.testing.assert_array_equal(a.params.fine[k], b.params.fine[k])


def test_coarse_only_fits_static_scene(toy):
    # one frozen config seen from several base angles: a plain multi-view scene
    spec, ds, fc = toy
    cam = ds.manifest.camera
    images, poses, configs = [], [], []
    for th in np.linspace(-np.pi, np.pi, 12, endpoint=False):
        q, pose = apply_base_rotation(spec, [th, 0.9], cam)
        images.append(render_silhouette(spec, q, cam.with_pose(pose)).image.reshape(-1))
        poses.append(pose)
        configs.append(q.values)
    manifest = dataclasses.replace(ds.manifest, samples=ds.manifest.samples[:12])
    static = ds._replace(manifest=manifest, images=np.array(images, dtype=np.float32), poses=np.array(poses),
                         configs=np.array(configs), subsets=[(1,)] * 12)
    res = tiny_train(toy, 150, use_fine=False, dataset=static)
    coarse = np.array([l[1] for l in res.losses])
    assert np.all(np.isnan([l[2] for l in res.losses]))
    assert coarse[-30:].mean() < 0.5 * coarse[:10].mean()
    assert all(np.array_equal(a, b) for a, b in zip(res.params.fine.values(),
                                                     init_field(fc, 0).fine.values()))


def test_nan_parameters_abort_with_diagnostic(toy):
    spec, ds, fc = toy
    params = init_field(fc, 0)
    params.coarse["density.b"][:] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        tiny_train(toy, 3, params=params)
