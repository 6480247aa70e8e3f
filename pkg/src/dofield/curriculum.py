"""Curriculum training data: DOF-subset ordering, base-rotation folding, datasets.

Samples are drawn subset by subset. Within a sample only the DOFs in the
active subset move; the rest stay at zero. The base angle is folded into
the camera pose, so every stored config has ``theta0 == 0``.

On disk a dataset is a directory with a ``manifest`` file, ``chain_spec.txt``,
``images/NNNNNN.pgm`` and ``annos/NNNNNN.txt``.
"""

import itertools
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .chain import (
    CameraModel,
    ChainError,
    JointConfig,
    base_fold_transform,
    read_chain_spec,
    render_silhouette,
    write_chain_spec,
)
from .fileio import (
    FormatError,
    ensure_dir,
    fmt_float,
    fmt_matrix,
    fmt_vector,
    kv_dict,
    parse_matrix,
    parse_vector,
    read_kv,
    read_pgm,
    write_kv,
    write_pgm,
)

DATASET_FORMAT = "dofield_dataset_v1"
ANNO_FORMAT = "dofield_anno_v1"


def build_curriculum(k):
    """Non-empty subsets of {1..k-1}, by size then lexicographically."""
    if k < 2:
        raise ValueError(f"need k >= 2 DOFs for a curriculum, got {k}")
    out = []
    for size in range(1, k):
        out.extend(itertools.combinations(range(1, k), size))
    return out


@dataclass(frozen=True)
class CurriculumPlan:
    subsets: tuple
    samples_per_subset: int
    base_rotations_per_sample: int

    @classmethod
    def for_chain(cls, k, samples_per_subset, base_rotations_per_sample):
        return cls(tuple(build_curriculum(k)), int(samples_per_subset), int(base_rotations_per_sample))

    @classmethod
    def full_scale(cls, k):
        """16 configs per subset, 6 base rotations each."""
        return cls.for_chain(k, 16, 6)

    def __post_init__(self):
        if self.samples_per_subset < 1 or self.base_rotations_per_sample < 1:
            raise ValueError("plan counts must be positive")

    @property
    def num_samples(self):
        return len(self.subsets) * self.samples_per_subset * self.base_rotations_per_sample


@dataclass(frozen=True)
class TrainingSample:
    image: np.ndarray
    config: JointConfig
    camera_pose: np.ndarray
    original_base_rotation: float
    active_subset: tuple
    sample_id: int


def sample_config(subset, spec, rng):
    """Uniform draw for DOFs in ``subset`` and the base; zero elsewhere."""
    lim = spec.limits
    v = np.zeros(spec.num_dofs)
    for l in subset:
        if not 1 <= l < spec.num_dofs:
            raise ChainError(f"subset index {l} outside 1..{spec.num_dofs - 1}")
    for l in sorted(subset):
        v[l] = rng.uniform(lim[l, 0], lim[l, 1])
    v[0] = rng.uniform(lim[0, 0], lim[0, 1])
    return JointConfig.create(spec, v)


def apply_base_rotation(spec, raw_config, camera):
    """Fold the base angle into the camera: returns (config with theta0 = 0, new pose)."""
    v = np.array(raw_config.values if isinstance(raw_config, JointConfig) else raw_config,
                 dtype=np.float64)
    pose = base_fold_transform(spec, v[0]) @ camera.pose
    v[0] = 0.0
    return JointConfig.create(spec, v), pose


def _sample_rng(seed, subset_index, j, r=None):
    key = [int(seed), int(subset_index), int(j)] + ([] if r is None else [int(r)])
    return np.random.default_rng(key)


def _camera_fields(camera):
    return [
        ("camera_focal", fmt_float(camera.focal_length)),
        ("camera_width", str(camera.image_width)),
        ("camera_height", str(camera.image_height)),
        ("camera_near", fmt_float(camera.near)),
        ("camera_far", fmt_float(camera.far)),
        ("camera_pose", fmt_matrix(camera.pose)),
    ]


def _camera_from(d):
    return CameraModel(float(d["camera_focal"]), int(d["camera_width"]), int(d["camera_height"]),
                       parse_matrix(d["camera_pose"]), float(d["camera_near"]), float(d["camera_far"]))


@dataclass
class SampleRecord:
    sample_id: int
    image: str
    anno: str
    subset: tuple
    seed: str


@dataclass
class DatasetManifest:
    root: str
    spec: object
    camera: CameraModel
    plan: CurriculumPlan
    seed: int
    samples: list
    format: str = DATASET_FORMAT

    @property
    def path(self):
        return os.path.join(self.root, "manifest")


def _subset_text(subset):
    return ",".join(str(i) for i in subset) if subset else "-"


def _parse_subset(text):
    return () if text == "-" else tuple(int(t) for t in text.split(","))


def _make_sample(spec, camera, subset, si, j, r, seed, sample_id):
    # the config of sample j is shared across its base rotations
    base = sample_config(subset, spec, _sample_rng(seed, si, j)).values.copy()
    lim = spec.limits
    theta0 = _sample_rng(seed, si, j, r).uniform(lim[0, 0], lim[0, 1])
    base[0] = theta0
    raw = JointConfig.create(spec, base)
    config, pose = apply_base_rotation(spec, raw, camera)
    image = render_silhouette(spec, config, camera.with_pose(pose)).image
    return TrainingSample(image, config, pose, float(theta0), tuple(subset), sample_id)


def write_annotation(path, sample, seed_text):
    write_kv(path, [
        ("format", ANNO_FORMAT),
        ("sample_id", str(sample.sample_id)),
        ("subset", _subset_text(sample.active_subset)),
        ("config", fmt_vector(sample.config.values)),
        ("camera_pose", fmt_matrix(sample.camera_pose)),
        ("original_base_rotation", fmt_float(sample.original_base_rotation)),
        ("seed", seed_text),
    ])


def read_annotation(path):
    d = kv_dict(read_kv(path), fmt=ANNO_FORMAT, path=path,
                required=("sample_id", "subset", "config", "camera_pose", "original_base_rotation"))
    return {
        "sample_id": int(d["sample_id"]),
        "subset": _parse_subset(d["subset"]),
        "config": parse_vector(d["config"]),
        "camera_pose": parse_matrix(d["camera_pose"]),
        "original_base_rotation": float(d["original_base_rotation"]),
        "seed": d.get("seed", ""),
    }


def generate_dataset(spec, camera, plan, seed, out_dir):
    """Render and store every sample of ``plan``. Deterministic in (spec, camera, plan, seed)."""
    ensure_dir(out_dir)
    ensure_dir(os.path.join(out_dir, "images"))
    ensure_dir(os.path.join(out_dir, "annos"))
    write_chain_spec(spec, os.path.join(out_dir, "chain_spec.txt"))
    records = []
    sample_id = 0
    for si, subset in enumerate(plan.subsets):
        for j in range(plan.samples_per_subset):
            for r in range(plan.base_rotations_per_sample):
                s = _make_sample(spec, camera, subset, si, j, r, seed, sample_id)
                img_rel = f"images/{sample_id:06d}.pgm"
                anno_rel = f"annos/{sample_id:06d}.txt"
                seed_text = f"{seed}:{si}:{j}:{r}"
                write_pgm(os.path.join(out_dir, img_rel), s.image)
                write_annotation(os.path.join(out_dir, anno_rel), s, seed_text)
                records.append(SampleRecord(sample_id, img_rel, anno_rel, tuple(subset), seed_text))
                sample_id += 1
    manifest = DatasetManifest(out_dir, spec, camera, plan, int(seed), records)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest):
    plan = manifest.plan
    pairs = [
        ("format", DATASET_FORMAT),
        ("chain_spec", "chain_spec.txt"),
        *_camera_fields(manifest.camera),
        ("subsets", " ; ".join(_subset_text(s) for s in plan.subsets)),
        ("samples_per_subset", str(plan.samples_per_subset)),
        ("base_rotations_per_sample", str(plan.base_rotations_per_sample)),
        ("seed", str(manifest.seed)),
        ("num_samples", str(len(manifest.samples))),
    ]
    for rec in manifest.samples:
        pairs.append(("sample", f"{rec.sample_id} {rec.image} {rec.anno} "
                                f"{_subset_text(rec.subset)} {rec.seed}"))
    write_kv(manifest.path, pairs)


def read_manifest(path):
    """Load a manifest (file path or dataset directory) and check every file exists."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest")
    root = os.path.dirname(os.path.abspath(path))
    pairs = read_kv(path)
    d = kv_dict(pairs, fmt=DATASET_FORMAT, path=path,
                required=("chain_spec", "subsets", "samples_per_subset",
                          "base_rotations_per_sample", "seed", "num_samples"))
    spec = read_chain_spec(os.path.join(root, d["chain_spec"]))
    try:
        camera = _camera_from(d)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad camera fields: {exc}") from exc
    plan = CurriculumPlan(tuple(_parse_subset(t.strip()) for t in d["subsets"].split(";")),
                          int(d["samples_per_subset"]), int(d["base_rotations_per_sample"]))
    records = []
    for k, v in pairs:
        if k != "sample":
            continue
        parts = v.split()
        if len(parts) != 5:
            raise FormatError(f"{path}: malformed sample record {v!r}")
        rec = SampleRecord(int(parts[0]), parts[1], parts[2], _parse_subset(parts[3]), parts[4])
        for rel in (rec.image, rec.anno):
            if not os.path.exists(os.path.join(root, rel)):
                raise FormatError(f"{path}: referenced file missing: {os.path.join(root, rel)}")
        records.append(rec)
    if len(records) != int(d["num_samples"]) or len(records) != plan.num_samples:
        raise FormatError(f"{path}: sample count {len(records)} does not match the plan")
    return DatasetManifest(root, spec, camera, plan, int(d["seed"]), records)


def load_sample(manifest, index):
    rec = manifest.samples[index]
    anno = read_annotation(os.path.join(manifest.root, rec.anno))
    image = read_pgm(os.path.join(manifest.root, rec.image))
    return TrainingSample(image, JointConfig.create(manifest.spec, anno["config"]),
                          anno["camera_pose"], anno["original_base_rotation"],
                          anno["subset"], anno["sample_id"])


def validate_sample(sample):
    """Return a list of invariant violations (empty when the sample is fine)."""
    problems = []
    v = sample.config.values
    if v[0] != 0.0:
        problems.append(f"sample {sample.sample_id}: theta0 = {v[0]!r}")
    off = [l for l in range(1, len(v)) if l not in sample.active_subset and v[l] != 0.0]
    if off:
        problems.append(f"sample {sample.sample_id}: non-zero DOFs {off} outside subset")
    rot = sample.camera_pose[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
        problems.append(f"sample {sample.sample_id}: pose rotation not orthonormal")
    return problems


class Dataset(NamedTuple):
    """A dataset held in memory for training."""
    manifest: DatasetManifest
    images: np.ndarray  # [S, H*W] float32 in {0, 1}
    poses: np.ndarray  # [S, 4, 4]
    configs: np.ndarray  # [S, k]
    subsets: list


def load_dataset(manifest):
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    samples = [load_sample(manifest, i) for i in range(len(manifest.samples))]
    images = np.stack([s.image.reshape(-1) for s in samples]).astype(np.float32)
    poses = np.stack([s.camera_pose for s in samples])
    configs = np.stack([s.config.values for s in samples])
    return Dataset(manifest, images, poses, configs, [s.active_subset for s in samples])


class Batch(NamedTuple):
    sample_ids: np.ndarray  # [b]
    pixels: np.ndarray  # [b, rays_per_image] flat pixel indices


def batch_iterator(manifest, batch_size, rays_per_image, epoch_seed):
    """One epoch of shuffled batches; pixels drawn without replacement per sample.

    ``manifest`` may be a DatasetManifest or an in-memory Dataset.
    """
    if isinstance(manifest, Dataset):
        manifest = manifest.manifest
    num_samples = len(manifest.samples)
    num_pixels = manifest.camera.image_width * manifest.camera.image_height
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 1 <= rays_per_image <= num_pixels:
        raise ValueError(f"rays_per_image must be in 1..{num_pixels}")
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(num_samples)
    for start in range(0, num_samples, batch_size):
        ids = order[start:start + batch_size]
        if rays_per_image == num_pixels:
            pix = np.stack([rng.permutation(num_pixels) for _ in ids])
        else:
            pix = np.stack([rng.choice(num_pixels, rays_per_image, replace=False) for _ in ids])
        yield Batch(ids, pix)
