"""Scenario configuration and the two built-in experiment presets."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .field import (BiasFieldSpec, Bounds, Constant, GaussianRadial, GridInterp, Sum,
                    field_from_dict, field_to_dict, make_eval_grid)
from .gpr import Hyperparams
from .ipp import PlannerConfig
from .sim import DEFAULT_DT, DEFAULT_OMEGA_MAX, DEFAULT_S_MAX, NoiseConfig

PLANNERS = ("boustrophedon", "ipp", "fixed_waypoints")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    bounds: Bounds = dc_field(default_factory=lambda: Bounds(0.0, 50.0, 0.0, 50.0))
    n_drones: int = 3
    initial_poses: object = "auto"  # "auto" or list of (x, y, heading)
    field: BiasFieldSpec = dc_field(default_factory=lambda: Constant((0.0, 0.0)))
    noise: NoiseConfig = dc_field(default_factory=NoiseConfig)
    planner: str = "ipp"
    waypoints: Optional[list] = None  # per-drone waypoint lists for fixed_waypoints
    planner_cfg: PlannerConfig = dc_field(default_factory=PlannerConfig)
    gp: Hyperparams = dc_field(default_factory=Hyperparams)
    gp_optimize: bool = False
    gp_optimize_every: int = 10
    gp_restarts: int = 2
    gp_max_nodes: int = 1500
    duration: float = 30.0
    dt: float = DEFAULT_DT
    sbe_start: float = 2.0
    anchor_drone: int = 0
    anchor_bias: Optional[tuple] = None  # None: field value at the anchor's true start
    merge_tol: float = 1e-6
    s_max: float = DEFAULT_S_MAX
    omega_max: float = DEFAULT_OMEGA_MAX
    map_grid_spacing: float = 1.0
    seed: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "bounds", Bounds.from_value(self.bounds))
        if self.noise.rng_seed != self.seed:
            object.__setattr__(self, "noise", replace(self.noise, rng_seed=self.seed))
        pc = self.planner_cfg
        if pc.n_drones != self.n_drones or pc.bounds != self.bounds:
            object.__setattr__(self, "planner_cfg",
                               replace(pc, n_drones=self.n_drones, bounds=self.bounds))
        self.validate()

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def sbe_start_tick(self) -> int:
        return int(math.ceil(self.sbe_start / self.dt - 1e-9))

    def validate(self) -> None:
        if self.n_drones < 2:
            raise ConfigError("need at least two drones for pair deltas")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not (self.duration > self.sbe_start >= 0):
            raise ConfigError("need duration > sbe_start >= 0")
        if not 0 <= self.anchor_drone < self.n_drones:
            raise ConfigError(f"anchor drone {self.anchor_drone} out of range")
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if self.planner == "fixed_waypoints":
            if not self.waypoints or len(self.waypoints) != self.n_drones:
                raise ConfigError("fixed_waypoints needs one waypoint list per drone")
        if self.initial_poses != "auto" and len(self.initial_poses) != self.n_drones:
            raise ConfigError("initial_poses must be 'auto' or one pose per drone")
        if self.gp_optimize_every < 1 or self.gp_max_nodes < 1:
            raise ConfigError("gp_optimize_every and gp_max_nodes must be >= 1")

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def start_poses(self) -> list[tuple[float, float, float]]:
        """Explicit poses, the first waypoint of each fixed route, or an even
        spread along the bottom edge facing +y."""
        if self.initial_poses != "auto":
            return [tuple(float(v) for v in p) if len(p) == 3 else (float(p[0]), float(p[1]), 0.0)
                    for p in self.initial_poses]
        if self.planner == "fixed_waypoints":
            poses = []
            for wps in self.waypoints:
                (x0, y0), (x1, y1) = wps[0], wps[1] if len(wps) > 1 else wps[0]
                poses.append((float(x0), float(y0), math.atan2(y1 - y0, x1 - x0)))
            return poses
        b = self.bounds
        y = b.ymin + 0.05 * b.height
        return [(b.xmin + (i + 0.5) * b.width / self.n_drones, y, math.pi / 2)
                for i in range(self.n_drones)]

    def eval_grid(self) -> np.ndarray:
        return make_eval_grid(self.bounds, self.map_grid_spacing)

    def to_dict(self) -> dict:
        d = {
            "bounds": self.bounds.to_list(),
            "n_drones": self.n_drones,
            "initial_poses": self.initial_poses if self.initial_poses == "auto"
            else [list(p) for p in self.initial_poses],
            "field": field_to_dict(self.field),
            "noise": asdict(self.noise),
            "planner": self.planner,
            "waypoints": None if self.waypoints is None else [[list(w) for w in ws] for ws in self.waypoints],
            "planner_cfg": {k: v for k, v in asdict(self.planner_cfg).items()
                            if k not in ("n_drones", "bounds")},
            "gp": asdict(self.gp),
            "anchor_bias": None if self.anchor_bias is None else list(self.anchor_bias),
        }
        for name in ("gp_optimize", "gp_optimize_every", "gp_restarts", "gp_max_nodes", "duration",
                     "dt", "sbe_start", "anchor_drone", "merge_tol", "s_max", "omega_max",
                     "map_grid_spacing", "seed", "output_dir"):
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        d = copy.deepcopy(raw)
        base = preset(d.pop("preset")) if "preset" in d else cls()
        kw = {}
        if "bounds" in d:
            kw["bounds"] = Bounds.from_value(d.pop("bounds"))
        if "field" in d:
            kw["field"] = field_from_dict(d.pop("field"))
        if "noise" in d:
            kw["noise"] = replace(base.noise, **d.pop("noise"))
        if "planner_cfg" in d:
            pc = d.pop("planner_cfg")
            pc.pop("n_drones", None)
            pc.pop("bounds", None)
            kw["planner_cfg"] = replace(base.planner_cfg, **pc)
        if "gp" in d:
            kw["gp"] = replace(base.gp, **d.pop("gp"))
        if "anchor" in d:
            anchor = d.pop("anchor")
            kw["anchor_drone"] = int(anchor.get("drone_id", base.anchor_drone))
            if anchor.get("known_bias") is not None:
                kw["anchor_bias"] = tuple(float(v) for v in anchor["known_bias"])
        if d.get("anchor_bias") is not None:
            d["anchor_bias"] = tuple(float(v) for v in d["anchor_bias"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        try:
            return replace(base, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    """Read a YAML (or JSON) scenario file."""
    with open(Path(path)) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ScenarioConfig.from_dict(raw)


def perturbation_grid(amplitude: float = 0.5) -> GridInterp:
    """Smooth low-amplitude vector field tabulated at 10 m spacing over
    [-10, 60]^2, so slightly out-of-field positions stay inside the grid."""
    xs = -10.0 + 10.0 * np.arange(8)
    gx, gy = np.meshgrid(xs, xs)
    u = np.sin(2 * np.pi * gx / 50.0 + 0.3) * np.cos(np.pi * gy / 50.0)
    v = np.cos(2 * np.pi * gy / 50.0 - 0.5) * np.sin(np.pi * gx / 50.0)
    return GridInterp((-10.0, -10.0), 10.0, amplitude * np.stack([u, v], axis=-1))


# two designated waypoints per drone, spread over the field
SOLVER_VALIDATION_WAYPOINTS = [
    [(5.0, 5.0), (17.0, 5.0)],
    [(30.0, 8.0), (42.0, 12.0)],
    [(45.0, 25.0), (38.0, 35.0)],
    [(35.0, 45.0), (23.0, 42.0)],
    [(15.0, 45.0), (5.0, 38.0)],
    [(8.0, 25.0), (12.0, 14.0)],
    [(20.0, 25.0), (30.0, 25.0)],
]


def preset(name: str) -> ScenarioConfig:
    """``solver_validation``: 7 drones on fixed waypoint pairs, 30 sensing
    instants (210 positions). ``ipp_comparison``: 3 drones over a radial
    Gaussian bias bump, 30 s with the bias solver from 2 s."""
    if name == "solver_validation":
        return ScenarioConfig(
            n_drones=7,
            field=Sum((Constant((2.0, 0.0)), perturbation_grid(0.5))),
            noise=NoiseConfig(process_sigma=0.05),
            planner="fixed_waypoints",
            waypoints=[list(w) for w in SOLVER_VALIDATION_WAYPOINTS],
            gp_optimize=True,
            duration=29 * DEFAULT_DT,
            sbe_start=0.0,
        )
    if name == "ipp_comparison":
        return ScenarioConfig(
            n_drones=3,
            field=GaussianRadial((35.0, 30.0), 5.0, 10.0),
            planner="ipp",
            planner_cfg=PlannerConfig(n_drones=3, points_per_drone=3),
            duration=30.0,
            sbe_start=2.0,
        )
    raise ConfigError(f"unknown preset {name!r}")
