"""Query-time self-model: density grids, clouds, meshes and quality metrics."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .chain import chain_sdf, config_values, sample_surface_points, workspace_bounds
from .field import alpha, params_finite, query_density
from .fileio import fmt_float, fmt_vector, write_kv
from .geometry import MeshLite, PointCloud
from .mc_tables import TRI_TABLE

# Published full-scale figures for a 7-DOF arm, kept in reports for context only.
REFERENCE_CHAMFER_M = 0.024
REFERENCE_CHAMFER_PCT = 1.94
REFERENCE_WORKSPACE_Z_M = 1.254


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    resolution: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        res = np.asarray(self.resolution, dtype=np.int64)
        if lo.shape != (3,) or hi.shape != (3,) or res.shape != (3,):
            raise ValueError("grid bounds and resolution need 3 entries")
        if np.any(hi <= lo):
            raise ValueError("grid bounds are degenerate")
        if np.any(res < 2):
            raise ValueError("grid resolution must be >= 2 per axis")
        object.__setattr__(self, "lo", tuple(map(float, lo)))
        object.__setattr__(self, "hi", tuple(map(float, hi)))
        object.__setattr__(self, "resolution", tuple(map(int, res)))

    @classmethod
    def with_pitch(cls, lo, hi, pitch):
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        res = np.maximum(np.ceil((hi - lo) / pitch).astype(int) + 1, 2)
        return cls(tuple(lo), tuple(hi), tuple(res))

    @property
    def spacing(self):
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.resolution) - 1)

    def axes(self):
        # i / (n - 1) keeps nodes bit-identical when the resolution is refined to 2n - 1
        return [lo + (hi - lo) * (np.arange(n) / (n - 1))
                for lo, hi, n in zip(self.lo, self.hi, self.resolution)]

    def points(self):
        """Grid nodes in row-major (x slowest) order, [nx*ny*nz, 3]."""
        ax = self.axes()
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass
class QueryGrid:
    spec: GridSpec
    values: np.ndarray  # flattened alpha values, row-major

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != int(np.prod(self.spec.resolution)):
            raise ValueError("value count does not match grid resolution")
        if np.any(self.values < 0) or np.any(self.values > 1) or not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be alpha values in [0, 1]")

    def volume(self):
        return self.values.reshape(self.spec.resolution)


def query_grid(params, config, grid, network="fine"):
    """Alpha of the field at every grid node for one config."""
    net = getattr(params, network)
    sigma = query_density(net, params.config, grid.points(), np.asarray(config, dtype=np.float64))
    return QueryGrid(grid, alpha(sigma))


def oracle_grid(spec, config, grid):
    """Ground-truth occupancy on the grid (alpha 1 inside the arm, 0 outside)."""
    d = chain_sdf(spec, config, grid.points())
    return QueryGrid(grid, (d <= 0.0).astype(np.float64))


def extract_point_cloud(grid, isolevel=0.015):
    """Grid nodes with alpha above the isolevel, in row-major order."""
    keep = grid.values > isolevel
    if not keep.any():
        warnings.warn("no grid value exceeds the isolevel; point cloud is empty", stacklevel=2)
    return PointCloud(grid.spec.points()[keep], grid.values[keep])


def marching_cubes(grid, isolevel=0.015):
    """Isosurface mesh in world coordinates, linear interpolation along cell edges."""
    verts, faces = kernels.marching_cubes(grid.volume(), float(isolevel), TRI_TABLE)
    verts = verts * grid.spec.spacing + np.asarray(grid.spec.lo)
    mesh = MeshLite(verts, faces)
    if len(faces):
        good = mesh.triangle_areas() > 1e-12
        mesh = MeshLite(verts, faces[good])
    return mesh


def chamfer_l2(a, b):
    """Symmetric mean nearest-neighbour distance, 0.5 * (mean_a min_b + mean_b min_a)."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer_l2 needs two non-empty point sets")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def voxel_iou(grid_pred, grid_true, isolevel=0.015):
    if grid_pred.spec != grid_true.spec:
        raise ValueError("voxel_iou needs grids with identical bounds and resolution")
    p = grid_pred.values > isolevel
    t = grid_true.values > isolevel
    union = np.count_nonzero(p | t)
    if union == 0:
        warnings.warn("both grids are empty; IoU defined as 1", stacklevel=2)
        return 1.0
    return np.count_nonzero(p & t) / union


def test_configs(spec, n, seed):
    """Held-out configs with every DOF drawn uniformly in its limits."""
    rng = np.random.default_rng([int(seed), 0xE7A1])
    lim = spec.limits
    return rng.uniform(lim[:, 0], lim[:, 1], size=(n, spec.num_dofs))


def default_eval_grid(spec, pitch=None):
    """Grid over the workspace box with pitch below a third of the thinnest link."""
    lo, hi = workspace_bounds(spec)
    if pitch is None:
        pitch = min(spec.link_radii) / 3.0 * 0.95
    return GridSpec.with_pitch(lo, hi, pitch)


@dataclass
class ConfigResult:
    config: np.ndarray
    chamfer_m: float
    chamfer_pct: float
    iou: float
    n_pred: int
    floor_m: float  # Chamfer of the oracle's own voxel cloud: the grid's resolution floor


@dataclass
class EvalReport:
    isolevel: float
    workspace_min_dim: float
    grid: GridSpec
    results: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    @property
    def mean_chamfer_m(self):
        return float(np.mean([r.chamfer_m for r in self.results])) if self.results else float("nan")

    @property
    def mean_chamfer_pct(self):
        return 100.0 * self.mean_chamfer_m / self.workspace_min_dim

    @property
    def mean_iou(self):
        return float(np.mean([r.iou for r in self.results])) if self.results else float("nan")

    def write(self, path):
        pairs = [
            ("format", "dofield_eval_v1"),
            ("reference_chamfer_m", fmt_float(REFERENCE_CHAMFER_M)),
            ("reference_chamfer_pct", fmt_float(REFERENCE_CHAMFER_PCT)),
            ("reference_workspace_z_m", fmt_float(REFERENCE_WORKSPACE_Z_M)),
            ("reference_setting", "7-DOF arm, full-scale training; context only"),
            ("isolevel", fmt_float(self.isolevel)),
            ("workspace_min_dim_m", fmt_float(self.workspace_min_dim)),
            ("grid_lo", fmt_vector(self.grid.lo)),
            ("grid_hi", fmt_vector(self.grid.hi)),
            ("grid_resolution", " ".join(map(str, self.grid.resolution))),
        ]
        for f in self.flagged:
            pairs.append(("flag", f))
        for i, r in enumerate(self.results):
            pairs.append(("config", f"{i} chamfer_m={r.chamfer_m:.9g} chamfer_pct={r.chamfer_pct:.6g} "
                                    f"iou={r.iou:.6g} n_pred={r.n_pred} floor_m={r.floor_m:.9g} "
                                    f"theta={fmt_vector(r.config)}"))
        pairs += [
            ("mean_chamfer_m", fmt_float(self.mean_chamfer_m)),
            ("mean_chamfer_pct", fmt_float(self.mean_chamfer_pct)),
            ("mean_iou", fmt_float(self.mean_iou)),
        ]
        write_kv(path, pairs)


def evaluate(params, spec, configs, grid=None, isolevel=0.015, n_surface=4000, seed=0):
    """Compare the learned field against the analytic arm on each config."""
    if grid is None:
        grid = default_eval_grid(spec)
    lo, hi = workspace_bounds(spec)
    report = EvalReport(float(isolevel), float(np.min(hi - lo)), grid)
    if not params_finite(params):
        report.flagged.append("checkpoint contains non-finite parameters")
        return report
    if not params.meta.get("steps"):
        report.flagged.append("checkpoint reports zero training steps")
    for i, cfg in enumerate(np.atleast_2d(configs)):
        cfg = config_values(spec, cfg)
        truth = sample_surface_points(spec, cfg, n_surface, [int(seed), i])
        pred_grid = query_grid(params, cfg, grid)
        true_grid = oracle_grid(spec, cfg, grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cloud = extract_point_cloud(pred_grid, isolevel)
            floor_cloud = extract_point_cloud(true_grid, isolevel)
        if len(cloud) == 0:
            report.flagged.append(f"config {i}: empty prediction")
            cd = float("inf")
        else:
            cd = chamfer_l2(cloud, truth)
        floor = chamfer_l2(floor_cloud, truth) if len(floor_cloud) else float("nan")
        report.results.append(ConfigResult(np.array(cfg), cd, 100.0 * cd / report.workspace_min_dim,
                                           voxel_iou(pred_grid, true_grid, isolevel), len(cloud), floor))
    return report
