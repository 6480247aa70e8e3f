"""Using the self-model: touch-a-target inverse kinematics, collision queries, RRT.

Two interchangeable density models are provided. :class:`LearnedField`
wraps a trained checkpoint; :class:`OracleField` is built from the analytic
arm so planner behaviour can be tested independently of training quality.
Both expose ``alpha(points, theta, activated)`` and
``touch_loss(theta, surface_points, tau)``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .chain import Capsule, axis_angle, capsule_arrays, chain_sdf, forward_kinematics, homogeneous
from .field import (
    alpha as alpha_of,
    field_forward,
    fold_world_points,
    normalize_configs,
    query_density,
)
from .fileio import fmt_float, fmt_vector
from .geometry import PointCloud, write_ply


class PlanningError(ValueError):
    """Invalid planning request (for example a start inside an obstacle)."""


@dataclass(frozen=True)
class SphereTarget:
    center: tuple
    radius: float
    n_surface: int = 256
    n_volume: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("target radius must be positive")
        if self.n_surface < 1 or self.n_volume < 1:
            raise ValueError("sample counts must be positive")
        if len(self.center) != 3:
            raise ValueError("target center needs 3 coordinates")
        object.__setattr__(self, "center", tuple(map(float, self.center)))


def sample_target(target):
    """Uniform points on the sphere surface and inside the ball."""
    rng = np.random.default_rng(target.seed)
    c = np.asarray(target.center)
    g = rng.normal(size=(target.n_surface, 3))
    surface = c + target.radius * g / np.linalg.norm(g, axis=1, keepdims=True)
    g = rng.normal(size=(target.n_volume, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = target.radius * rng.random(target.n_volume) ** (1.0 / 3.0)
    volume = c + g * r[:, None]
    return surface, volume


# --- density models ---------------------------------------------------------

class LearnedField:
    """Density model backed by the fine network of a trained checkpoint."""

    def __init__(self, params, network="fine"):
        self.params = params
        self.fc = params.config
        self.net = getattr(params, network)
        self.limits = np.asarray(self.fc.dof_limits)

    def alpha(self, points, theta, activated=True):
        sigma = query_density(self.net, self.fc, points, np.asarray(theta, dtype=np.float64),
                              with_activation=activated)
        return alpha_of(sigma)

    def touch_loss(self, theta, surface_points, tau):
        """Loss and its gradient in theta; the density head is used without its ReLU."""
        fc = self.fc
        theta = np.asarray(theta, dtype=np.float64)
        pts = np.asarray(surface_points, dtype=np.float64)
        folded = fold_world_points(fc, theta[0], pts)
        lo, hi = np.asarray(fc.coord_lo), np.asarray(fc.coord_hi)
        xn = 2.0 * (folded - lo) / (hi - lo) - 1.0
        inside = (xn >= -1.0) & (xn <= 1.0)
        xn = np.clip(xn, -1.0, 1.0)
        cfg = theta.copy()
        cfg[0] = 0.0
        x_t = ad.Tensor(xn, requires_grad=True)
        c_t = ad.Tensor(normalize_configs(cfg[None, :], fc), requires_grad=True)
        with ad.Tape() as tape:
            f = field_forward(self.net, fc, x_t, c_t, with_activation=False,
                              config_index=np.zeros(len(pts), dtype=np.int64))
            a = ad.sub(1.0, ad.exp(ad.neg(f)))
            m, _ = ad.min_(ad.neg(a))
            loss = ad.add(m, float(tau))
        tape.backward(loss)
        grad = np.zeros_like(theta)
        grad[1:] = c_t.grad[0, 1:] / fc.dof_scale[1:]
        # the base angle acts through the fold of the query points
        phi = -fc.base_sign * theta[0]
        dR = np.array([[-math.sin(phi), -math.cos(phi), 0.0],
                       [math.cos(phi), -math.sin(phi), 0.0],
                       [0.0, 0.0, 0.0]])
        dfold = -fc.base_sign * ((pts - np.asarray(fc.base_origin)) @ dR.T)
        gx = x_t.grad * inside * (2.0 / (hi - lo))
        grad[0] = float(np.sum(gx * dfold))
        return float(loss.data), grad


class OracleField:
    """Softened analytic occupancy.

    With s the distance outside the arm, alpha is 1 inside, falls linearly
    to 0.6 at s = ``margin`` and then to 0 at s = ``margin + falloff``. So
    alpha >= 0.6 exactly when a point is within ``margin`` of the arm, and
    the long tail gives a useful gradient from far away. Gradients of the
    touch loss are central finite differences in theta.
    """

    def __init__(self, spec, margin=0.01, falloff=2.0, fd_step=1e-4):
        self.spec = spec
        self.margin = float(margin)
        self.falloff = float(falloff)
        self.fd_step = float(fd_step)
        self.limits = spec.limits

    def _sdf(self, theta, points):
        # no joint-limit check: finite differences may step just past a limit
        caps = []
        for i, F in enumerate(_frames(self.spec, theta)):
            a = F[:3, 3].copy() if not caps else caps[-1].b
            b = (F @ np.array([self.spec.link_lengths[i], 0.0, 0.0, 1.0]))[:3]
            caps.append(Capsule(a, b, self.spec.link_radii[i]))
        a, b, r = capsule_arrays(caps)
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return kernels.capsule_sdf(pts, a, b, r)[0]

    def alpha(self, points, theta, activated=True):
        s = np.maximum(self._sdf(np.asarray(theta, dtype=np.float64), points), 0.0)
        m, F = self.margin, self.falloff
        if m > 0:
            near = 1.0 - 0.4 * s / m
        else:
            near = np.where(s <= 0, 1.0, 0.6)
        far = 0.6 * np.maximum(0.0, 1.0 - (s - m) / F)
        return np.where(s <= m, near, far)

    def touch_loss(self, theta, surface_points, tau):
        theta = np.asarray(theta, dtype=np.float64)
        pts = np.asarray(surface_points, dtype=np.float64)

        def loss_at(q):
            return float(np.min(-self.alpha(pts, q)) + tau)

        grad = np.zeros_like(theta)
        h = self.fd_step
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            grad[i] = (loss_at(tp) - loss_at(tm)) / (2 * h)
        return loss_at(theta), grad


def _frames(spec, theta):
    T = homogeneous(trans=spec.base_origin)
    frames = []
    for i in range(spec.num_dofs):
        T = T @ homogeneous(axis_angle(spec.joint_axes[i], theta[i]))
        frames.append(T)
        T = T @ homogeneous(trans=(spec.link_lengths[i], 0.0, 0.0))
    return frames


def touch_loss(model, config, surface_points, tau=0.6):
    """min over surface points of -alpha, plus tau; <= 0 means the target is touched."""
    return model.touch_loss(config, surface_points, tau)


def touched(model, config, surface_points, tau=0.6):
    """Equivalent success test: max alpha over the surface points reaches tau."""
    return bool(np.max(model.alpha(surface_points, config, activated=False)) >= tau)


def config_space_query(model, config, volume_points, tau=0.6):
    """True when the config is collision-free: max alpha over the obstacle stays below tau."""
    return bool(np.max(model.alpha(volume_points, config, activated=True)) < tau)


# --- projected gradient descent ---------------------------------------------

@dataclass(frozen=True)
class PGDConfig:
    step_size: float = 0.5
    tau: float = 0.6
    max_iters: int = 500
    initial: tuple = None
    restarts: int = 0
    seed: int = 0
    stall_window: int = 50
    stall_tol: float = 1e-7

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class Trajectory:
    configs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    reason: str = "max_iters"
    attempts: int = 1

    @property
    def success(self):
        return self.reason == "reached"

    def write(self, path):
        lines = [f"# reason {self.reason}", f"# attempts {self.attempts}",
                 "# step theta... loss"]
        for i, c in enumerate(self.configs):
            loss = self.losses[i] if i < len(self.losses) else float("nan")
            lines.append(f"{i} {fmt_vector(c)} {fmt_float(loss)}")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_ply(self, path, spec):
        """End-effector positions along the trajectory as a PLY point cloud."""
        tips = [forward_kinematics(spec, c)[-1].b for c in self.configs]
        write_ply(path, cloud=PointCloud(np.array(tips).reshape(-1, 3)))


def project(config, limits):
    lim = np.asarray(limits)
    return np.clip(config, lim[:, 0], lim[:, 1])


def pgd_step(config, gradient, step_size, limits):
    return project(np.asarray(config, dtype=np.float64) - step_size * np.asarray(gradient), limits)


def _descend(model, theta, surface, cfg, budget):
    traj = Trajectory()
    best_hist = []
    for it in range(budget + 1):
        loss, grad = model.touch_loss(theta, surface, cfg.tau)
        traj.configs.append(theta.copy())
        traj.losses.append(loss)
        if loss <= 0:
            traj.reason = "reached"
            return traj, it
        if it == budget:
            break
        best_hist.append(min(loss, best_hist[-1]) if best_hist else loss)
        w = cfg.stall_window
        if len(best_hist) > w and best_hist[-w - 1] - best_hist[-1] < cfg.stall_tol:
            traj.reason = "stalled"
            return traj, it
        theta = pgd_step(theta, grad, cfg.step_size, model.limits)
    traj.reason = "max_iters"
    return traj, budget


def solve_ik(model, target, cfg):
    """Descend the touch loss from the initial config, then from random restarts.

    All attempts share the ``max_iters`` budget of gradient steps. The
    returned trajectory is the successful attempt, or the last one tried.
    """
    if isinstance(target, SphereTarget):
        surface, _ = sample_target(target)
    else:
        surface = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    lim = np.asarray(model.limits)
    theta = np.zeros(lim.shape[0]) if cfg.initial is None else np.asarray(cfg.initial, dtype=np.float64)
    theta = project(theta, lim)
    rng = np.random.default_rng([int(cfg.seed), 0x1C])
    budget = cfg.max_iters
    traj = None
    for attempt in range(cfg.restarts + 1):
        if attempt:
            theta = rng.uniform(lim[:, 0], lim[:, 1])
        traj, used = _descend(model, theta, surface, cfg, budget)
        traj.attempts = attempt + 1
        budget -= used
        if traj.success or budget <= 0:
            break
    if not traj.success and budget <= 0:
        traj.reason = "max_iters"
    return traj


# --- RRT --------------------------------------------------------------------

@dataclass(frozen=True)
class RRTConfig:
    step_size: float = 0.2
    goal_bias: float = 0.1
    max_iters: int = 5000
    edge_resolution: float = 0.05
    seed: int = 0


@dataclass
class PlanResult:
    success: bool
    path: list
    iterations: int
    nodes: int

    def as_trajectory(self):
        return Trajectory(list(self.path), [float("nan")] * len(self.path),
                          "reached" if self.success else "max_iters")


def edge_samples(a, b, resolution):
    """Interpolated configs after ``a`` up to and including ``b``, spaced <= resolution per DOF."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = max(1, int(math.ceil(np.max(np.abs(b - a)) / resolution)))
    s = np.arange(1, n + 1) / n
    return a + s[:, None] * (b - a)


def edge_valid(validity, a, b, resolution):
    return all(validity(q) for q in edge_samples(a, b, resolution))


def rrt_plan(validity, start, goal, limits, cfg=RRTConfig()):
    """Plain RRT in joint space with goal bias and interpolated edge checks."""
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    lim = np.asarray(limits)
    for name, q in (("start", start), ("goal", goal)):
        if np.any(q < lim[:, 0]) or np.any(q > lim[:, 1]):
            raise PlanningError(f"{name} config outside joint limits")
        if not validity(q):
            raise PlanningError(f"{name} config is in collision")
    if np.array_equal(start, goal):
        return PlanResult(True, [start], 0, 1)
    rng = np.random.default_rng(cfg.seed)
    nodes = [start]
    parent = [-1]

    def close_to_goal(q):
        return (np.linalg.norm(goal - q) <= cfg.step_size
                and edge_valid(validity, q, goal, cfg.edge_resolution))

    def path_to(i):
        out = [goal]
        while i >= 0:
            out.append(nodes[i])
            i = parent[i]
        return out[::-1]

    if close_to_goal(start):
        return PlanResult(True, [start, goal], 0, 2)
    arr = start[None, :].copy()
    for it in range(1, cfg.max_iters + 1):
        q_rand = goal if rng.random() < cfg.goal_bias else rng.uniform(lim[:, 0], lim[:, 1])
        i_near = int(np.argmin(np.linalg.norm(arr - q_rand, axis=1)))
        q_near = nodes[i_near]
        d = q_rand - q_near
        dist = np.linalg.norm(d)
        if dist == 0:
            continue
        q_new = q_near + d * min(1.0, cfg.step_size / dist)
        if not edge_valid(validity, q_near, q_new, cfg.edge_resolution):
            continue
        nodes.append(q_new)
        parent.append(i_near)
        arr = np.vstack([arr, q_new])
        if close_to_goal(q_new):
            return PlanResult(True, path_to(len(nodes) - 1), it, len(nodes) + 1)
    return PlanResult(False, [], cfg.max_iters, len(nodes))


# --- validity closures ------------------------------------------------------

def swept_margin(spec, resolution):
    """Bound on how far any arm point moves between neighbouring edge samples.

    Samples are at most ``resolution`` apart per DOF, so any config on an
    edge is within half of that of a checked sample. A point at distance rho
    from joint j moves at most rho * |dtheta_j|.
    """
    rho = [sum(spec.link_lengths[j:]) + max(spec.link_radii[j:]) for j in range(spec.num_dofs)]
    return 0.5 * resolution * float(sum(rho))


def analytic_validity(spec, center, radius, margin=0.0):
    """Exact capsule/ball clearance test, optionally with an extra safety margin."""
    c = np.asarray(center, dtype=np.float64).reshape(1, 3)

    def valid(q):
        return bool(chain_sdf(spec, q, c)[0] > radius + margin)

    return valid


def field_validity(model, volume_points, tau=0.6):
    def valid(q):
        return config_space_query(model, q, volume_points, tau)

    return valid


def path_collisions(path, validity, resolution):
    """Count invalid samples along a path re-checked at ``resolution``."""
    bad = 0 if validity(path[0]) else 1
    for a, b in zip(path[:-1], path[1:]):
        bad += sum(not validity(q) for q in edge_samples(a, b, resolution))
    return bad
