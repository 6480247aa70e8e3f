"""Run configurations: shipped presets, JSON files and ``key=value`` overrides.

A run config is a nested dict with the sections ``chain``, ``camera``,
``curriculum``, ``field``, ``render``, ``train``, ``eval`` and ``planner``,
plus a top-level ``seed``.
"""

import copy
import json
import math

import numpy as np

from .chain import ChainSpec, default_camera, read_chain_spec, workspace_bounds
from .curriculum import CurriculumPlan
from .field import FieldConfig
from .planner import PGDConfig, RRTConfig
from .render import RenderConfig, TrainConfig

_COMMON = {
    "seed": 0,
    "camera": {"width": 64, "height": 64, "elevation_deg": 30.0, "distance_factor": 2.2},
    "field": {"individual_width": 16, "individual_depth": 3, "coord_width": 16, "coord_depth": 1,
              "group_width": 64, "group_depth": 2, "trunk_width": 64, "trunk_depth": 7,
              "bounds_margin": 1.1},
    "render": {"n_coarse": 32, "n_fine": 32, "background": 1.0},
    "train": {"lr": 5e-4, "lr_final": 5e-5, "steps": 12000, "batch_size": 8, "rays_per_image": 32,
              "checkpoint_every": 0},
    "eval": {"n_test": 10, "isolevel": 0.015, "n_surface": 4000, "test_seed": 123},
    "planner": {"tau": 0.6, "step_size": 1.0, "max_iters": 500, "restarts": 8,
                "n_surface": 256, "n_volume": 256, "oracle_margin": 0.01, "oracle_falloff": 2.0,
                "rrt_step": 0.2, "goal_bias": 0.1, "rrt_max_iters": 5000, "edge_resolution": 0.05},
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    "desk2dof": _merge(_COMMON, {
        "chain": {"num_dofs": 2, "link_lengths": [0.35, 0.3], "link_radii": [0.05, 0.05],
                  "joint_axes": [[0, 0, -1], [0, 0, 1]],
                  "joint_limits": [[-math.pi, math.pi], [-2.6, 2.6]], "base_origin": [0, 0, 0]},
        "curriculum": {"samples_per_subset": 48, "base_rotations_per_sample": 6},
        "train": {"steps": 4000},
    }),
    "desk3dof": _merge(_COMMON, {
        "chain": {"num_dofs": 3, "link_lengths": [0.25, 0.25, 0.2], "link_radii": [0.07, 0.065, 0.06],
                  "joint_axes": [[0, 0, -1], [0, 1, 0], [0, 1, 0]],
                  "joint_limits": [[-math.pi, math.pi], [-1.0, 1.0], [-1.2, 1.2]],
                  "base_origin": [0, 0, 0]},
        "curriculum": {"samples_per_subset": 22, "base_rotations_per_sample": 6},
        "train": {"steps": 8000},
    }),
    # full-scale numbers for documentation; far beyond a desktop CPU budget
    "paper7dof": _merge(_COMMON, {
        "chain": {"num_dofs": 8,
                  "link_lengths": [0.333, 0.15, 0.166, 0.15, 0.234, 0.15, 0.088, 0.107],
                  "link_radii": [0.08, 0.07, 0.07, 0.065, 0.06, 0.055, 0.05, 0.045],
                  "joint_axes": [[0, 0, -1], [0, 1, 0], [0, 0, 1], [0, 1, 0], [0, 0, 1],
                                 [0, 1, 0], [0, 0, 1], [0, 1, 0]],
                  "joint_limits": [[-math.pi, math.pi], [-1.76, 1.76], [-2.9, 2.9], [-3.07, 0.0],
                                   [-2.9, 2.9], [-0.02, 3.75], [-2.9, 2.9], [-1.5, 1.5]],
                  "base_origin": [0, 0, 0]},
        "curriculum": {"samples_per_subset": 16, "base_rotations_per_sample": 6},
        "field": {"trunk_width": 128},
        "render": {"n_coarse": 64, "n_fine": 64},
        "train": {"lr": 4e-5, "lr_final": None, "steps": 1_320_000, "batch_size": 15,
                  "rays_per_image": 10240, "checkpoint_every": 10000},
        "eval": {"n_test": 30},
    }),
}


class ConfigError(ValueError):
    """The run configuration is malformed."""


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def apply_override(cfg, assignment):
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: no section {p!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown key")
    node[parts[-1]] = value
    return cfg


def resolve(preset_name=None, path=None, overrides=()):
    """Preset, then file (merged on top), then overrides."""
    if preset_name is None and path is None:
        raise ConfigError("give --preset or --config")
    cfg = preset(preset_name) if preset_name else copy.deepcopy(_COMMON)
    if path:
        cfg = _merge(cfg, load_config(path))
    for a in overrides:
        apply_override(cfg, a)
    validate(cfg)
    return cfg


def validate(cfg):
    if "seed" not in cfg or not isinstance(cfg["seed"], int):
        raise ConfigError("config needs an integer seed")
    if "chain" not in cfg and "chain_spec" not in cfg:
        raise ConfigError("config needs a chain section or a chain_spec path")
    for section in ("camera", "field", "render", "train", "eval", "planner"):
        if not isinstance(cfg.get(section), dict):
            raise ConfigError(f"config section {section!r} missing")
    try:
        chain_from(cfg)
        render_config(cfg)
        train_config(cfg)
        pgd_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def chain_from(cfg):
    if "chain_spec" in cfg:
        return read_chain_spec(cfg["chain_spec"])
    c = cfg["chain"]
    return ChainSpec(int(c["num_dofs"]), tuple(c["link_lengths"]), tuple(c["link_radii"]),
                     tuple(map(tuple, c["joint_axes"])), tuple(map(tuple, c["joint_limits"])),
                     tuple(c.get("base_origin", (0, 0, 0))))


def camera_from(cfg, spec):
    c = cfg["camera"]
    return default_camera(spec, int(c["width"]), int(c["height"]), float(c["elevation_deg"]),
                          float(c["distance_factor"]))


def plan_from(cfg, spec):
    c = cfg["curriculum"]
    return CurriculumPlan.for_chain(spec.num_dofs, c["samples_per_subset"], c["base_rotations_per_sample"])


def field_config(cfg, spec):
    f = dict(cfg["field"])
    margin = float(f.pop("bounds_margin", 1.1))
    lo, hi = workspace_bounds(spec)
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * margin
    return FieldConfig.for_chain(spec, tuple(center - half), tuple(center + half), **f)


def render_config(cfg):
    r = cfg["render"]
    return RenderConfig(int(r["n_coarse"]), int(r["n_fine"]), float(r["background"]), True)


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(lr=float(t["lr"]), steps=int(t["steps"]), batch_size=int(t["batch_size"]),
                       rays_per_image=int(t["rays_per_image"]), seed=int(cfg["seed"]),
                       checkpoint_every=int(t.get("checkpoint_every", 0)),
                       use_fine=bool(t.get("use_fine", True)),
                       lr_final=None if t.get("lr_final") is None else float(t["lr_final"]))


def pgd_config(cfg, initial=None):
    p = cfg["planner"]
    return PGDConfig(step_size=float(p["step_size"]), tau=float(p["tau"]),
                     max_iters=int(p["max_iters"]), initial=initial,
                     restarts=int(p["restarts"]), seed=int(cfg["seed"]))


def rrt_config(cfg):
    p = cfg["planner"]
    return RRTConfig(float(p["rrt_step"]), float(p["goal_bias"]), int(p["rrt_max_iters"]),
                     float(p["edge_resolution"]), int(cfg["seed"]))


def to_json(cfg):
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    return json.dumps(cfg, indent=2, sort_keys=True, default=conv) + "\n"
