"""Discrete-time unicycle drones with biased GPS and noisy range/bearing sensing.

Motion per tick (true state, with additive process noise on position)::

    P' = P + s * (cos th, sin th) * dt + e,      th' = wrap(th + w * dt)

Each drone reads its GPS ``g = P + M(P) + e_g`` and, for every peer ``j``,
a unit bearing ``(P_i - P_j + e_b) / |P_i - P_j + e_b|`` and a range
``|P_i - P_j + e_r|``. Note the bearing points from the peer toward the
observer; the pair-delta construction in :mod:`swarmbias.sbe` relies on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .field import BiasFieldSpec, eval_bias

TWO_PI = 2.0 * math.pi
DEFAULT_S_MAX = 2.0
DEFAULT_OMEGA_MAX = math.pi
DEFAULT_DT = 0.2


class DegenerateGeometryError(ValueError):
    """Two drones share a position, so bearing is undefined."""


def wrap_angle(theta: float) -> float:
    """Wrap into ``[0, 2*pi)``."""
    w = math.fmod(theta, TWO_PI)
    if w < 0:
        w += TWO_PI
    # fmod + shift can round up to exactly 2*pi for tiny negative inputs
    if w >= TWO_PI:
        w = 0.0
    return w


def wrap_to_pi(theta: float) -> float:
    """Wrap into ``[-pi, pi)``."""
    return wrap_angle(theta + math.pi) - math.pi


def _pos(p) -> np.ndarray:
    arr = np.array(p, dtype=float).reshape(2)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"position must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DroneState:
    position: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _pos(self.position))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True, eq=False)
class DroneEstimate:
    """Dead-reckoned pose; only ever advanced by :func:`dead_reckon`."""

    position: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _pos(self.position))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @classmethod
    def from_state(cls, state: DroneState) -> "DroneEstimate":
        return cls(state.position, state.heading)


@dataclass(frozen=True)
class Action:
    """Speed/turn-rate command, clamped into ``[0, s_max] x [-omega_max, omega_max]``."""

    speed: float
    angular_velocity: float
    s_max: float = DEFAULT_S_MAX
    omega_max: float = DEFAULT_OMEGA_MAX

    def __post_init__(self):
        object.__setattr__(self, "speed", min(max(float(self.speed), 0.0), self.s_max))
        object.__setattr__(
            self, "angular_velocity",
            min(max(float(self.angular_velocity), -self.omega_max), self.omega_max),
        )


@dataclass(frozen=True)
class NoiseConfig:
    process_sigma: float = 0.05
    gps_sigma: float = 0.01
    bearing_sigma: float = 0.01
    range_sigma: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("process_sigma", "gps_sigma", "bearing_sigma", "range_sigma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def zero(cls, rng_seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, rng_seed)


@dataclass(frozen=True, eq=False)
class Observation:
    gps: np.ndarray
    bearings: np.ndarray  # (n-1, 2), ascending peer id, self omitted
    ranges: np.ndarray  # (n-1,)
    timestep: int
    drone_id: int
    peer_ids: tuple = field(default=())

    def bearing_to(self, j: int) -> np.ndarray:
        return self.bearings[self.peer_ids.index(j)]

    def range_to(self, j: int) -> float:
        return float(self.ranges[self.peer_ids.index(j)])


def drone_rng(seed: int, drone_id: int) -> np.random.Generator:
    """Independent stream per drone, stable under any iteration order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(drone_id)]))


def step(state: DroneState, action: Action, dt: float, noise: NoiseConfig,
         rng: np.random.Generator) -> DroneState:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    e = rng.normal(0.0, noise.process_sigma, 2)
    th = state.heading
    move = action.speed * dt * np.array([math.cos(th), math.sin(th)])
    return DroneState(state.position + move + e, th + action.angular_velocity * dt)


def dead_reckon(est: DroneEstimate, action: Action, dt: float) -> DroneEstimate:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    th = est.heading
    move = action.speed * dt * np.array([math.cos(th), math.sin(th)])
    return DroneEstimate(est.position + move, th + action.angular_velocity * dt)


def sense(world: BiasFieldSpec, swarm, i: int, noise: NoiseConfig,
          rng: np.random.Generator, k: int) -> Observation:
    """Observation bundle of drone ``i`` at tick ``k``.

    ``swarm`` is a sequence of :class:`DroneState` (or bare positions).
    Draw order per call: GPS, then per peer (ascending id) bearing then range.
    """
    positions = [s.position if isinstance(s, DroneState) else _pos(s) for s in swarm]
    n = len(positions)
    if n < 2:
        raise ValueError("sensing needs at least two drones")
    p_i = positions[i]
    gps = p_i + eval_bias(world, p_i) + rng.normal(0.0, noise.gps_sigma, 2)

    peers = tuple(j for j in range(n) if j != i)
    bearings = np.empty((n - 1, 2))
    ranges = np.empty(n - 1)
    for slot, j in enumerate(peers):
        rel = p_i - positions[j]
        if math.hypot(rel[0], rel[1]) < 1e-9:
            raise DegenerateGeometryError(f"drones {i} and {j} coincide at {tuple(p_i)}")
        b = rel + rng.normal(0.0, noise.bearing_sigma, 2)
        bearings[slot] = b / math.hypot(b[0], b[1])
        r = rel + rng.normal(0.0, noise.range_sigma, 2)
        ranges[slot] = math.hypot(r[0], r[1])
    gps.setflags(write=False)
    bearings.setflags(write=False)
    ranges.setflags(write=False)
    return Observation(gps, bearings, ranges, int(k), int(i), peers)


def waypoint_controller(est: DroneEstimate, waypoint, limits=(DEFAULT_S_MAX, DEFAULT_OMEGA_MAX),
                        dt: float = DEFAULT_DT, arrive_tol: float = 0.5) -> Action:
    """Proportional heading controller driving the estimate toward ``waypoint``.

    The turn rate would null the heading error in one tick and is clamped to
    ``omega_max``. Speed is ``s_max`` (or ``distance / dt`` inside one tick of
    travel), scaled by ``max(0, cos(heading_error))`` so a drone facing away
    turns before it moves instead of orbiting a close waypoint.
    """
    if not arrive_tol > 0:
        raise ValueError(f"arrive_tol must be > 0, got {arrive_tol}")
    s_max, w_max = limits
    d = np.asarray(waypoint, dtype=float) - est.position
    dist = math.hypot(d[0], d[1])
    if dist <= arrive_tol:
        return Action(0.0, 0.0, s_max, w_max)
    err = wrap_to_pi(math.atan2(d[1], d[0]) - est.heading)
    omega = err / dt
    speed = min(s_max, dist / dt) * max(0.0, math.cos(err))
    return Action(speed, omega, s_max, w_max)
