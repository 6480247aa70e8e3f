import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dofield.chain import ChainSpec, default_camera, render_silhouette
from dofield.curriculum import (
    CurriculumPlan,
    apply_base_rotation,
    batch_iterator,
    build_curriculum,
    generate_dataset,
    load_dataset,
    load_sample,
    read_manifest,
    sample_config,
    validate_sample,
)
from dofield.fileio import FormatError


def test_curriculum_small_cases():
    assert build_curriculum(2) == [(1,)]
    assert build_curriculum(4) == [(1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3)]


def test_curriculum_k8_counts():
    subsets = build_curriculum(8)
    sizes = [len(s) for s in subsets]
    assert len(subsets) == 127
    assert sizes.count(1) == 7 and sizes.count(2) == 21
    assert sizes == sorted(sizes)


@given(st.integers(2, 10))
def test_curriculum_size_and_order(k):
    subsets = build_curriculum(k)
    assert len(subsets) == 2 ** (k - 1) - 1
    assert len(set(subsets)) == len(subsets)
    keys = [(len(s), s) for s in subsets]
    assert keys == sorted(keys)


def test_curriculum_rejects_k1():
    with pytest.raises(ValueError):
        build_curriculum(1)


def eight_dof():
    return ChainSpec(8, (0.1,) * 8, (0.02,) * 8, ((0, 0, 1),) + ((0, 1, 0),) * 7,
                     ((-math.pi, math.pi),) + ((-1.0, 2.0),) * 7)


def test_sample_config_zeroes_inactive():
    spec = eight_dof()
    q = sample_config((1, 4), spec, np.random.default_rng(0)).values
    assert np.all(q[[2, 3, 5, 6, 7]] == 0)
    assert q[1] != 0 and q[4] != 0


def test_sample_config_empty_subset():
    spec = eight_dof()
    q = sample_config((), spec, np.random.default_rng(1)).values
    assert np.all(q[1:] == 0)


def test_sample_config_uniform_mean():
    spec = eight_dof()
    rng = np.random.default_rng(2)
    draws = np.array([sample_config((1,), spec, rng).values[1] for _ in range(10000)])
    se = 3.0 / math.sqrt(12) / math.sqrt(10000)
    assert abs(draws.mean() - 0.5) < 3 * se


def test_apply_base_rotation_identity_and_half_turn(arm3):
    cam = default_camera(arm3)
    q, pose = apply_base_rotation(arm3, [0.0, 0.2, 0.3], cam)
    assert np.array_equal(pose, cam.pose)
    assert np.array_equal(q.values, [0.0, 0.2, 0.3])
    q, pose = apply_base_rotation(arm3, [math.pi, 0.2, 0.3], cam)
    np.testing.assert_allclose(pose[:2, 3], -cam.pose[:2, 3], atol=1e-12)
    assert pose[2, 3] == pytest.approx(cam.pose[2, 3])
    np.testing.assert_allclose(pose[:3, :3], np.diag([-1, -1, 1]) @ cam.pose[:3, :3], atol=1e-12)
    assert q.values[0] == 0.0


def test_apply_base_rotation_renders_identically(arm3):
    cam = default_camera(arm3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        raw = rng.uniform(arm3.limits[:, 0], arm3.limits[:, 1])
        q, pose = apply_base_rotation(arm3, raw, cam)
        assert np.array_equal(render_silhouette(arm3, raw, cam).image,
                              render_silhouette(arm3, q, cam.with_pose(pose)).image)


@pytest.fixture
def small_dataset(arm3, tmp_path):
    plan = CurriculumPlan.for_chain(3, 2, 2)
    return generate_dataset(arm3, default_camera(arm3, 32, 32), plan, 11, str(tmp_path / "ds"))


def test_dataset_counts_and_invariants(small_dataset):
    m = small_dataset
    assert len(m.samples) == 12 == m.plan.num_samples
    m2 = read_manifest(m.root)
    for i in range(len(m2.samples)):
        s = load_sample(m2, i)
        assert validate_sample(s) == []
        cam = m2.camera.with_pose(s.camera_pose)
        assert np.array_equal(render_silhouette(m2.spec, s.config, cam).image, s.image)


def test_dataset_regeneration_is_byte_identical(arm3, small_dataset, tmp_path):
    again = generate_dataset(arm3, small_dataset.camera, small_dataset.plan, 11, str(tmp_path / "ds2"))
    for rel in ["manifest", "chain_spec.txt"] + [r.image for r in again.samples] + [r.anno for r in again.samples]:
        with open(os.path.join(small_dataset.root, rel), "rb") as a, open(os.path.join(again.root, rel), "rb") as b:
            assert a.read() == b.read(), rel


def test_missing_file_is_reported(small_dataset):
    os.remove(os.path.join(small_dataset.root, small_dataset.samples[3].image))
    with pytest.raises(FormatError, match="000003.pgm"):
        read_manifest(small_dataset.root)


def test_full_scale_plan():
    plan = CurriculumPlan.full_scale(8)
    assert plan.num_samples == 127 * 16 * 6


def test_batch_iterator_full_batch_and_exhaustion(small_dataset):
    n_pix = 32 * 32
    batches = list(batch_iterator(small_dataset, 12, n_pix, 0))
    assert len(batches) == 1
    b = batches[0]
    assert sorted(b.sample_ids) == list(range(12))
    for row in b.pixels:
        assert sorted(row) == list(range(n_pix))
    subsets = {small_dataset.samples[i].subset for i in b.sample_ids}
    assert subsets == {(1,), (2,), (1, 2)}


def test_batch_iterator_deterministic(small_dataset):
    a = list(batch_iterator(small_dataset, 5, 10, 3))
    b = list(batch_iterator(small_dataset, 5, 10, 3))
    c = list(batch_iterator(small_dataset, 5, 10, 4))
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert not all(np.array_equal(x.sample_ids, y.sample_ids) for x, y in zip(a, c))
    assert [len(x.sample_ids) for x in a] == [5, 5, 2]


def test_batches_mix_cardinalities(arm3, tmp_path):
    plan = CurriculumPlan.for_chain(3, 10, 2)  # 60 samples, batches of 4
    m = generate_dataset(arm3, default_camera(arm3, 8, 8), plan, 0, str(tmp_path / "mix"))
    spans = []
    for epoch in range(100):
        for b in batch_iterator(m, 4, 4, epoch):
            spans.append(len({len(m.samples[i].subset) for i in b.sample_ids}))
    assert np.mean(spans) >= 1.5
    assert np.mean([s >= 2 for s in spans]) > 0.5


def test_batch_iterator_validates(small_dataset):
    with pytest.raises(ValueError):
        next(batch_iterator(small_dataset, 0, 10, 0))
    with pytest.raises(ValueError):
        next(batch_iterator(small_dataset, 2, 32 * 32 + 1, 0))


def test_load_dataset_shapes(small_dataset):
    ds = load_dataset(small_dataset.root)
    assert ds.images.shape == (12, 32 * 32)
    assert np.all(ds.configs[:, 0] == 0)
