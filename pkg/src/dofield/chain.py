"""Analytic capsule-chain arm: kinematics, occupancy, silhouettes, cameras.

This is the ground truth everything learned is checked against. Links are
capsules (segment plus radius). In the zero pose every link extends along
the local +x axis of the frame produced by its joint rotation; joint ``i``
rotates about ``joint_axes[i]`` expressed in the parent link's frame.

DOF 0 is the base rotation. Its axis must be vertical (+z or -z) and the
rotation is about the vertical line through ``base_origin``.
"""

import functools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .fileio import (
    FormatError,
    fmt_matrix,
    fmt_vector,
    kv_dict,
    parse_matrix,
    parse_vector,
    read_kv,
    write_kv,
)
from .geometry import PointCloud

CHAIN_SPEC_FORMAT = "chain_spec_v1"


class ChainError(ValueError):
    """Invalid chain geometry, configuration or camera."""


@dataclass(frozen=True)
class ChainSpec:
    num_dofs: int
    link_lengths: tuple
    link_radii: tuple
    joint_axes: tuple
    joint_limits: tuple
    base_origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        k = self.num_dofs
        if k < 2:
            raise ChainError(f"num_dofs must be >= 2, got {k}")
        lengths = np.asarray(self.link_lengths, dtype=np.float64)
        radii = np.asarray(self.link_radii, dtype=np.float64)
        axes = np.asarray(self.joint_axes, dtype=np.float64)
        limits = np.asarray(self.joint_limits, dtype=np.float64)
        if lengths.shape != (k,) or radii.shape != (k,):
            raise ChainError(f"expected {k} link lengths and radii")
        if axes.shape != (k, 3) or limits.shape != (k, 2):
            raise ChainError(f"expected {k} joint axes and {k} limit pairs")
        if np.any(lengths <= 0) or np.any(radii <= 0):
            raise ChainError("link lengths and radii must be positive")
        if np.any(np.abs(np.linalg.norm(axes, axis=1) - 1.0) > 1e-9):
            raise ChainError("joint axes must be unit vectors")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ChainError("joint limits need min < max")
        if abs(abs(axes[0, 2]) - 1.0) > 1e-9:
            raise ChainError("the base joint (DOF 0) must rotate about the vertical axis")
        object.__setattr__(self, "link_lengths", tuple(map(float, lengths)))
        object.__setattr__(self, "link_radii", tuple(map(float, radii)))
        object.__setattr__(self, "joint_axes", tuple(tuple(map(float, a)) for a in axes))
        object.__setattr__(self, "joint_limits", tuple(tuple(map(float, l)) for l in limits))
        object.__setattr__(self, "base_origin", tuple(map(float, self.base_origin)))

    @property
    def limits(self):
        return np.array(self.joint_limits)

    @property
    def base_sign(self):
        """+1 if the base turns about +z, -1 about -z."""
        return 1.0 if self.joint_axes[0][2] > 0 else -1.0

    @property
    def reach(self):
        return float(sum(self.link_lengths) + max(self.link_radii))

    def config(self, values):
        return JointConfig.create(self, values)

    def zero(self):
        return JointConfig(np.zeros(self.num_dofs))


@dataclass(frozen=True)
class JointConfig:
    values: np.ndarray = field(repr=True)

    @classmethod
    def create(cls, spec, values):
        v = np.array(values, dtype=np.float64).reshape(-1)
        if v.shape[0] != spec.num_dofs:
            raise ChainError(f"config has {v.shape[0]} values, chain has {spec.num_dofs} DOFs")
        lim = spec.limits
        bad = np.nonzero((v < lim[:, 0]) | (v > lim[:, 1]))[0]
        if bad.size:
            i = int(bad[0])
            raise ChainError(f"DOF {i} value {v[i]!r} outside limits {tuple(lim[i])}")
        v.setflags(write=False)
        return cls(v)

    def __len__(self):
        return self.values.shape[0]


def config_values(spec, config):
    """Validated value vector from a JointConfig or a plain sequence."""
    if isinstance(config, JointConfig):
        if len(config) != spec.num_dofs:
            raise ChainError("config length does not match chain")
        return config.values
    return JointConfig.create(spec, config).values


@dataclass(frozen=True)
class CameraModel:
    focal_length: float
    image_width: int
    image_height: int
    pose: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ChainError("camera pose must be 4x4")
        if not np.allclose(pose[3], [0, 0, 0, 1], atol=0):
            raise ChainError("camera pose last row must be [0, 0, 0, 1]")
        rot = pose[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1) > 1e-9:
            raise ChainError("camera rotation must be orthonormal with det +1")
        if not 0 < self.near < self.far:
            raise ChainError("camera needs 0 < near < far")
        if self.focal_length <= 0 or self.image_width < 1 or self.image_height < 1:
            raise ChainError("camera intrinsics must be positive")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)

    @property
    def position(self):
        return self.pose[:3, 3].copy()

    def with_pose(self, pose):
        return CameraModel(self.focal_length, self.image_width, self.image_height, pose,
                           self.near, self.far)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ChainError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ChainError("ray needs t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def area(self):
        r = self.radius
        return 2 * np.pi * r * np.linalg.norm(self.b - self.a) + 4 * np.pi * r * r


class Silhouette(NamedTuple):
    image: np.ndarray
    empty: bool  # True when no pixel sees the robot


# --- rigid transforms -------------------------------------------------------

def axis_angle(axis, angle):
    """3x3 rotation about a unit axis (Rodrigues)."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def homogeneous(rot=None, trans=None):
    T = np.eye(4)
    if rot is not None:
        T[:3, :3] = rot
    if trans is not None:
        T[:3, 3] = trans
    return T


def rotation_about_base(spec, angle):
    """4x4 rotation by ``angle`` about the world z line through the base."""
    b = np.asarray(spec.base_origin)
    R = rot_z(angle)
    return homogeneous(R, b - R @ b)


def base_fold_transform(spec, theta0):
    """World transform that moves a camera so that base angle ``theta0`` can be zeroed.

    Turning the robot by ``theta0`` about its base axis looks, from the
    camera, exactly like turning the camera the other way about that axis.
    With the base axis along -z this is the plain ``R_z(theta0)``.
    """
    return rotation_about_base(spec, -spec.base_sign * theta0)


def fold_points(spec, theta0, points):
    """Map world points of a robot at base angle ``theta0`` into its theta0 = 0 frame."""
    T = base_fold_transform(spec, theta0)
    return points @ T[:3, :3].T + T[:3, 3]


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from ``eye`` at ``target``.

    Camera frame: +x right, +y down, +z forward (into the scene).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise ChainError("look_at: view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return homogeneous(np.stack([right, down, fwd], axis=1), eye)


# --- kinematics -------------------------------------------------------------

def link_frames(spec, config):
    """4x4 frames at each joint, after applying that joint's rotation."""
    theta = config_values(spec, config)
    T = homogeneous(trans=spec.base_origin)
    frames = []
    for i in range(spec.num_dofs):
        T = T @ homogeneous(axis_angle(spec.joint_axes[i], theta[i]))
        frames.append(T)
        T = T @ homogeneous(trans=(spec.link_lengths[i], 0.0, 0.0))
    return frames


def forward_kinematics(spec, config):
    """Capsules of the arm in world coordinates, base link first."""
    caps = []
    for i, F in enumerate(link_frames(spec, config)):
        a = F[:3, 3].copy()
        b = (F @ np.array([spec.link_lengths[i], 0.0, 0.0, 1.0]))[:3]
        if caps:
            a = caps[-1].b  # serial chain: share the joint point exactly
        caps.append(Capsule(a, b, spec.link_radii[i]))
    return caps


def capsule_arrays(capsules):
    a = np.array([c.a for c in capsules])
    b = np.array([c.b for c in capsules])
    r = np.array([c.radius for c in capsules])
    return a, b, r


def chain_sdf(spec, config, points):
    """Minimum capsule signed distance at each point ([n, 3] -> [n])."""
    a, b, r = capsule_arrays(forward_kinematics(spec, config))
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return kernels.capsule_sdf(pts, a, b, r)[0]


def occupancy(spec, config, point):
    """True iff the point lies inside (or on) some capsule."""
    pts = np.asarray(point, dtype=np.float64)
    d = chain_sdf(spec, config, pts.reshape(-1, 3))
    if pts.ndim == 1:
        return bool(d[0] <= 0.0)
    return d <= 0.0


def capsule_sphere_collision(spec, config, center, radius):
    """Exact test: does any capsule intersect the closed ball?"""
    return bool(chain_sdf(spec, config, np.asarray(center).reshape(1, 3))[0] <= radius)


@functools.lru_cache(maxsize=16)
def _workspace_samples(spec, n_samples, seed):
    # cached: every camera and field config asks for the same sampled poses
    rng = np.random.default_rng(seed)
    lim = spec.limits
    thetas = rng.uniform(lim[:, 0], lim[:, 1], size=(n_samples, spec.num_dofs))
    corners = np.array(np.meshgrid(*lim, indexing="ij")).reshape(spec.num_dofs, -1).T
    thetas = np.concatenate([thetas, corners, np.zeros((1, spec.num_dofs))])
    pts = [np.asarray(spec.base_origin)]
    for th in thetas:
        frames = link_frames(spec, th)
        pts.extend(F[:3, 3] for F in frames)
        pts.append((frames[-1] @ np.array([spec.link_lengths[-1], 0, 0, 1.0]))[:3])
    pts = np.array(pts)
    pts.flags.writeable = False
    return pts


def workspace_bounds(spec, n_samples=20000, seed=0):
    """Axis-aligned box covering the arm over its joint ranges (sampled)."""
    pts = _workspace_samples(spec, n_samples, seed)
    pad = max(spec.link_radii)
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def workspace_sphere(spec, n_samples=20000, seed=0):
    """Center of the workspace box and the radius of a ball holding every sampled pose."""
    pts = _workspace_samples(spec, n_samples, seed)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    return center, float(np.linalg.norm(pts - center, axis=1).max() + max(spec.link_radii))


# --- cameras and rendering --------------------------------------------------

def _camera_dirs(camera, rows, cols):
    u = np.asarray(cols, dtype=np.float64) + 0.5
    v = np.asarray(rows, dtype=np.float64) + 0.5
    d = np.stack([(u - camera.image_width / 2.0) / camera.focal_length,
                  (v - camera.image_height / 2.0) / camera.focal_length,
                  np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_ray(camera, pixel_row, pixel_col):
    if not (0 <= pixel_row < camera.image_height and 0 <= pixel_col < camera.image_width):
        raise ChainError(f"pixel ({pixel_row}, {pixel_col}) outside the image")
    d_cam = _camera_dirs(camera, pixel_row, pixel_col)
    d = camera.pose[:3, :3] @ d_cam
    d /= np.linalg.norm(d)
    return Ray(camera.position, d, camera.near, camera.far)


def camera_rays(camera, pixel_index=None):
    """World-frame origins and unit directions for pixels (row-major flat indices)."""
    n = camera.image_width * camera.image_height
    idx = np.arange(n) if pixel_index is None else np.asarray(pixel_index)
    rows, cols = np.divmod(idx, camera.image_width)
    d = _camera_dirs(camera, rows, cols) @ camera.pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def render_silhouette(spec, config, camera):
    """Binary silhouette: 0 (black) where the pixel ray hits the arm, 1 elsewhere."""
    a, b, r = capsule_arrays(forward_kinematics(spec, config))
    o, d = camera_rays(camera)
    n = o.shape[0]
    hits = kernels.segment_hits(o, d, np.full(n, camera.near), np.full(n, camera.far), a, b, r)
    image = np.where(hits, 0, 1).astype(np.uint8).reshape(camera.image_height, camera.image_width)
    return Silhouette(image, not bool(hits.any()))


def default_camera(spec, width=64, height=64, elevation_deg=30.0, distance_factor=2.2, margin=1.05):
    """Camera on the -y side, looking at the workspace center and framing the whole workspace."""
    lo, hi = workspace_bounds(spec)
    center, radius = workspace_sphere(spec)
    distance = distance_factor * radius
    el = np.deg2rad(elevation_deg)
    eye = center + distance * np.array([0.0, -np.cos(el), np.sin(el)])
    pose = look_at(eye, center)
    half = np.arcsin(min(radius * margin / distance, 0.99))
    focal = 0.5 * min(width, height) / np.tan(half)
    near, far = scene_bounds_for(eye, lo, hi)
    return CameraModel(float(focal), int(width), int(height), pose, near, far)


def scene_bounds_for(eye, lo, hi, margin=1.1):
    """near/far covering the workspace box inflated by ``margin`` from ``eye``."""
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * margin
    dist = np.linalg.norm(np.asarray(eye) - center)
    r = np.linalg.norm(half)
    return float(max(dist - r, 1e-3)), float(dist + r)


# --- surface sampling -------------------------------------------------------

def _perp_basis(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _sample_capsule(cap, n, rng):
    axis = cap.b - cap.a
    length = np.linalg.norm(axis)
    r = cap.radius
    cyl = 2 * np.pi * r * length
    on_cyl = rng.random(n) < cyl / (cyl + 4 * np.pi * r * r)
    pts = np.empty((n, 3))
    m = int(on_cyl.sum())
    if m:
        u, v = _perp_basis(axis)
        h = rng.random(m)
        phi = rng.uniform(0, 2 * np.pi, m)
        pts[on_cyl] = (cap.a + np.outer(h, axis)
                       + r * (np.outer(np.cos(phi), u) + np.outer(np.sin(phi), v)))
    m = n - m
    if m:
        g = rng.normal(size=(m, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        toward_b = g @ axis > 0
        base = np.where(toward_b[:, None], cap.b, cap.a)
        pts[~on_cyl] = base + r * g
    return pts


def sample_surface_points(spec, config, n, seed):
    """Uniform samples on the surface of the union of capsules."""
    if n <= 0:
        raise ChainError("n must be positive")
    caps = forward_kinematics(spec, config)
    a, b, r = capsule_arrays(caps)
    areas = np.array([c.area() for c in caps])
    rng = np.random.default_rng(seed)
    out = []
    have = 0
    while have < n:
        want = int((n - have) * 1.3) + 16
        which = rng.choice(len(caps), size=want, p=areas / areas.sum())
        batch = np.empty((want, 3))
        for i, cap in enumerate(caps):
            sel = which == i
            if sel.any():
                batch[sel] = _sample_capsule(cap, int(sel.sum()), rng)
        d = kernels.capsule_sdf(batch, a, b, r)[0]
        keep = batch[d > -1e-10]  # drop points buried inside a neighbouring capsule
        out.append(keep)
        have += len(keep)
    return PointCloud(np.concatenate(out)[:n])


# --- serialization ----------------------------------------------------------

def write_chain_spec(spec, path):
    write_kv(path, [
        ("format", CHAIN_SPEC_FORMAT),
        ("num_dofs", str(spec.num_dofs)),
        ("link_lengths", fmt_vector(spec.link_lengths)),
        ("link_radii", fmt_vector(spec.link_radii)),
        ("joint_axes", fmt_matrix(spec.joint_axes)),
        ("joint_limits", fmt_matrix(spec.joint_limits)),
        ("base_origin", fmt_vector(spec.base_origin)),
    ])


def read_chain_spec(path):
    d = kv_dict(read_kv(path), fmt=CHAIN_SPEC_FORMAT, path=path,
                required=("num_dofs", "link_lengths", "link_radii", "joint_axes", "joint_limits"))
    try:
        return ChainSpec(
            num_dofs=int(d["num_dofs"]),
            link_lengths=tuple(parse_vector(d["link_lengths"])),
            link_radii=tuple(parse_vector(d["link_radii"])),
            joint_axes=tuple(map(tuple, parse_matrix(d["joint_axes"]))),
            joint_limits=tuple(map(tuple, parse_matrix(d["joint_limits"]))),
            base_origin=tuple(parse_vector(d.get("base_origin", "0 0 0"))),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def spec_to_text_fields(spec):
    """The chain spec as key/value strings, for embedding in other files."""
    return {
        "num_dofs": str(spec.num_dofs),
        "link_lengths": fmt_vector(spec.link_lengths),
        "link_radii": fmt_vector(spec.link_radii),
        "joint_axes": fmt_matrix(spec.joint_axes),
        "joint_limits": fmt_matrix(spec.joint_limits),
        "base_origin": fmt_vector(spec.base_origin),
    }


__all__ = [
    "CHAIN_SPEC_FORMAT", "Capsule", "CameraModel", "ChainError", "ChainSpec", "JointConfig",
    "Ray", "Silhouette", "axis_angle", "base_fold_transform", "camera_rays", "capsule_arrays",
    "capsule_sphere_collision", "chain_sdf", "default_camera", "fold_points",
    "forward_kinematics", "look_at", "occupancy", "pixel_to_ray", "read_chain_spec",
    "render_silhouette", "rot_z", "rotation_about_base", "sample_surface_points",
    "workspace_bounds", "workspace_sphere", "write_chain_spec",
]
