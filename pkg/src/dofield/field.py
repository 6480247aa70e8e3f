"""Configuration-conditioned density field with per-input encoders.

Each coordinate axis and each DOF gets its own small MLP. Their outputs are
concatenated per group (coordinates, DOFs), each group goes through a group
MLP, and the two group codes are concatenated into the trunk, which ends in
a one-unit density head.

The first layer of every DOF encoder has no bias. A DOF that is zero for a
whole batch therefore sends exactly zero gradient to that layer's weights.
DOFs are normalized by pure scaling (0 rad stays 0) for the same reason.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .fileio import FormatError

CKPT_MAGIC = b"dofield_ckpt_v1\n"


@dataclass(frozen=True)
class FieldConfig:
    k: int
    coord_lo: tuple
    coord_hi: tuple
    dof_limits: tuple
    base_origin: tuple = (0.0, 0.0, 0.0)
    base_sign: float = 1.0
    individual_width: int = 16
    individual_depth: int = 3
    coord_width: int = 16
    coord_depth: int = 1
    group_width: int = 64
    group_depth: int = 2
    trunk_width: int = 128
    trunk_depth: int = 7
    color_head: bool = False
    density_bias: float = 0.1

    def __post_init__(self):
        lo = np.asarray(self.coord_lo, dtype=np.float64)
        hi = np.asarray(self.coord_hi, dtype=np.float64)
        lim = np.asarray(self.dof_limits, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("coordinate bounds must be a non-degenerate 3-D box")
        if lim.shape != (self.k, 2) or np.any(lim[:, 1] <= lim[:, 0]):
            raise ValueError("dof_limits must be k ordered (min, max) pairs")
        if np.any(np.max(np.abs(lim), axis=1) == 0):
            raise ValueError("dof limits must not both be zero")
        for name in ("individual_depth", "coord_depth", "group_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.trunk_depth < 2:
            raise ValueError("trunk_depth must be >= 2 (hidden layer plus head)")
        object.__setattr__(self, "coord_lo", tuple(map(float, lo)))
        object.__setattr__(self, "coord_hi", tuple(map(float, hi)))
        object.__setattr__(self, "dof_limits", tuple(tuple(map(float, r)) for r in lim))
        object.__setattr__(self, "base_origin", tuple(map(float, self.base_origin)))

    @classmethod
    def for_chain(cls, spec, coord_lo, coord_hi, **widths):
        return cls(spec.num_dofs, tuple(coord_lo), tuple(coord_hi), spec.joint_limits,
                   spec.base_origin, spec.base_sign, **widths)

    @property
    def dof_scale(self):
        return np.max(np.abs(np.asarray(self.dof_limits)), axis=1)

    @property
    def trunk_input_width(self):
        return 2 * self.group_width

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["dof_limits"] = tuple(tuple(r) for r in d["dof_limits"])
        return cls(**d)


def layer_shapes(fc):
    """Ordered ``name -> shape`` for every parameter array (declaration order)."""
    shapes = {}

    def mlp(prefix, d_in, width, depth, first_bias=True):
        for j in range(depth):
            shapes[f"{prefix}.{j}.W"] = (d_in if j == 0 else width, width)
            if j > 0 or first_bias:
                shapes[f"{prefix}.{j}.b"] = (width,)

    for l in range(3):
        mlp(f"enc_x{l}", 1, fc.coord_width, fc.coord_depth)
    for l in range(fc.k):
        mlp(f"enc_t{l}", 1, fc.individual_width, fc.individual_depth, first_bias=False)
    mlp("grp_x", 3 * fc.coord_width, fc.group_width, fc.group_depth)
    mlp("grp_t", fc.k * fc.individual_width, fc.group_width, fc.group_depth)
    mlp("trunk", fc.trunk_input_width, fc.trunk_width, fc.trunk_depth - 1)
    shapes["density.W"] = (fc.trunk_width, 1)
    shapes["density.b"] = (1,)
    if fc.color_head:
        shapes["color.W"] = (fc.trunk_width, 3)
        shapes["color.b"] = (3,)
    return shapes


@dataclass
class FieldParams:
    config: FieldConfig
    coarse: dict
    fine: dict
    meta: dict = field(default_factory=dict)


def init_network(fc, rng):
    dt = ad.default_dtype()
    out = {}
    for name, shape in layer_shapes(fc).items():
        if name.endswith(".W"):
            bound = np.sqrt(6.0 / shape[0])  # He-uniform for ReLU layers
            if name.startswith("density") or name.startswith("color"):
                bound = np.sqrt(3.0 / shape[0])
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dt)
        else:
            out[name] = np.zeros(shape, dtype=dt)
    out["density.b"][:] = fc.density_bias
    return out


def init_field(fc, seed):
    rng = np.random.default_rng(seed)
    return FieldParams(fc, init_network(fc, rng), init_network(fc, rng))


# --- normalization ----------------------------------------------------------

def normalize_coords(coords, fc):
    """Map the box to [-1, 1]^3. Returns (normalized, number of clamped values)."""
    lo = np.asarray(fc.coord_lo)
    hi = np.asarray(fc.coord_hi)
    x = 2.0 * (np.asarray(coords, dtype=np.float64) - lo) / (hi - lo) - 1.0
    clamped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    return np.clip(x, -1.0, 1.0), clamped


def normalize_configs(configs, fc):
    """Pure scaling by the largest absolute limit, so 0 rad maps to 0."""
    return np.asarray(configs, dtype=np.float64) / fc.dof_scale


def normalize_inputs(coords, configs, fc):
    xn, clamped = normalize_coords(coords, fc)
    return xn, normalize_configs(configs, fc), clamped


def denormalize_inputs(coords_n, configs_n, fc):
    lo = np.asarray(fc.coord_lo)
    hi = np.asarray(fc.coord_hi)
    x = (np.asarray(coords_n) + 1.0) * 0.5 * (hi - lo) + lo
    return x, np.asarray(configs_n) * fc.dof_scale


# --- forward ----------------------------------------------------------------

def _mlp(net, prefix, h, depth):
    for j in range(depth):
        h = ad.matmul(h, net[f"{prefix}.{j}.W"])
        b = net.get(f"{prefix}.{j}.b")
        if b is not None:
            h = ad.add(h, b)
        h = ad.relu(h)
    return h


def _column(x, l):
    return ad.slice_(x, (slice(None), slice(l, l + 1)))


def field_forward(net, fc, coords_n, configs_n, with_activation=True, config_index=None,
                  return_color=False):
    """Densities at normalized inputs.

    ``net`` maps parameter names to Tensors (for gradients) or arrays.
    ``configs_n`` is [n, k], or [u, k] with ``config_index`` [n] selecting a
    row per point; repeated rows are encoded once and gathered.
    Returns a Tensor [n] (and colors [n, 3] when requested).
    """
    net = {k: ad.as_tensor(v) for k, v in net.items()}
    x = ad.as_tensor(coords_n)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ad.ShapeError(f"field_forward: coords must be [n, 3], got {x.shape}")
    cfg = ad.as_tensor(configs_n)
    if cfg.ndim != 2 or cfg.shape[1] != fc.k:
        raise ad.ShapeError(f"field_forward: configs must be [n, {fc.k}], got {cfg.shape}")
    n = x.shape[0]
    if config_index is None:
        if cfg.shape[0] != n:
            raise ad.ShapeError(f"field_forward: {n} coords but {cfg.shape[0]} configs")
        if not cfg.requires_grad:
            uniq, config_index = np.unique(cfg.data, axis=0, return_inverse=True)
            cfg = ad.Tensor(uniq)
            config_index = config_index.reshape(-1)
    else:
        config_index = np.asarray(config_index).reshape(-1)
        if config_index.shape[0] != n:
            raise ad.ShapeError("field_forward: config_index length must match coords")

    hx = [_mlp(net, f"enc_x{l}", _column(x, l), fc.coord_depth) for l in range(3)]
    gx = _mlp(net, "grp_x", ad.concat(hx, axis=-1), fc.group_depth)
    ht = [_mlp(net, f"enc_t{l}", _column(cfg, l), fc.individual_depth) for l in range(fc.k)]
    gt = _mlp(net, "grp_t", ad.concat(ht, axis=-1), fc.group_depth)
    if config_index is not None:
        gt = ad.take_rows(gt, config_index)
    h = _mlp(net, "trunk", ad.concat([gx, gt], axis=-1), fc.trunk_depth - 1)
    sigma = ad.add(ad.matmul(h, net["density.W"]), net["density.b"])
    if with_activation:
        sigma = ad.relu(sigma)
    sigma = ad.reshape(sigma, (n,))
    if return_color:
        if "color.W" not in net:
            raise ValueError("this field has no color head")
        color = ad.sigmoid(ad.add(ad.matmul(h, net["color.W"]), net["color.b"]))
        return sigma, color
    return sigma


def alpha(sigma):
    """Opacity for unit step length: 1 - exp(-sigma)."""
    return 1.0 - np.exp(-np.asarray(sigma, dtype=np.float64))


def query_density(net, fc, points, config, with_activation=True, chunk=65536):
    """Densities at world points for one world-frame config (no gradients).

    The base angle is folded into the points so the network only ever sees
    ``theta0 = 0``, matching how it was trained.
    """
    pts = fold_world_points(fc, config[0], np.asarray(points, dtype=np.float64).reshape(-1, 3))
    cfg = np.array(config, dtype=np.float64).reshape(1, -1)
    cfg[0, 0] = 0.0
    cfg_n = normalize_configs(cfg, fc)
    out = np.empty(len(pts), dtype=np.float64)
    for s in range(0, len(pts), chunk):
        xn, _ = normalize_coords(pts[s:s + chunk], fc)
        m = len(xn)
        out[s:s + m] = field_forward(net, fc, xn, cfg_n, with_activation,
                                     config_index=np.zeros(m, dtype=np.int64)).data
    return out


def base_rotation_matrix(fc, theta0):
    """Rotation (about the base z line) taking base-angle ``theta0`` points to the zero frame."""
    phi = -fc.base_sign * theta0
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def fold_world_points(fc, theta0, points):
    b = np.asarray(fc.base_origin)
    R = base_rotation_matrix(fc, theta0)
    return (points - b) @ R.T + b


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params, meta=None):
    """Header (JSON with config and array table) then little-endian float32 arrays."""
    fc = params.config
    shapes = layer_shapes(fc)
    names = [f"coarse/{n}" for n in shapes] + [f"fine/{n}" for n in shapes]
    header = {
        "field_config": fc.to_json(),
        "arrays": [[n, list(shapes[n.split("/", 1)[1]])] for n in names],
        "meta": dict(params.meta, **(meta or {})),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                which, name = n.split("/", 1)
                arr = getattr(params, which)[name]
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a dofield_ckpt_v1 checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    fc = FieldConfig.from_json(header["field_config"])
    expected = layer_shapes(fc)
    nets = {"coarse": {}, "fine": {}}
    dt = ad.default_dtype()
    for n, shape in header["arrays"]:
        which, name = n.split("/", 1)
        if tuple(shape) != expected.get(name):
            raise FormatError(f"{path}: array {n} has shape {shape}, expected {expected.get(name)}")
        count = int(np.prod(shape))
        if pos + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated at array {n}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        nets[which][name] = arr.astype(dt)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing or missing data")
    return FieldParams(fc, nets["coarse"], nets["fine"], header.get("meta", {}))


def params_finite(params):
    return all(np.all(np.isfinite(a)) for net in (params.coarse, params.fine) for a in net.values())
