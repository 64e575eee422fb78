"""Synthetic ground-truth GPS bias fields.

A bias field maps a planar position (meters) to the offset (meters) that the
GPS adds to a reading taken there. Four variants compose every experiment:

    Constant        same vector everywhere
    GaussianRadial  radially outward, Gaussian-shaped magnitude
    Sum             vector sum of child fields
    GridInterp      bilinear interpolation of vectors stored on a regular grid

Specs are plain frozen dataclasses so they can be hashed, compared and
round-tripped through the scenario config (see ``field_from_dict``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class DomainError(ValueError):
    """Query outside the region where a field is defined."""


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]`` in meters."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.xmax, self.ymin, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite bounds {vals}")
        if self.xmax < self.xmin or self.ymax < self.ymin:
            raise ValueError(f"inverted bounds {vals}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (
            (pts[:, 0] >= self.xmin - tol)
            & (pts[:, 0] <= self.xmax + tol)
            & (pts[:, 1] >= self.ymin - tol)
            & (pts[:, 1] <= self.ymax + tol)
        )

    def clip(self, points) -> np.ndarray:
        pts = np.array(points, dtype=float)
        pts[..., 0] = np.clip(pts[..., 0], self.xmin, self.xmax)
        pts[..., 1] = np.clip(pts[..., 1], self.ymin, self.ymax)
        return pts

    def to_list(self) -> list:
        return [[self.xmin, self.xmax], [self.ymin, self.ymax]]

    @classmethod
    def from_value(cls, value) -> "Bounds":
        if isinstance(value, Bounds):
            return value
        if isinstance(value, dict):
            return cls(float(value["xmin"]), float(value["xmax"]),
                       float(value["ymin"]), float(value["ymax"]))
        (x0, x1), (y0, y1) = value
        return cls(float(x0), float(x1), float(y0), float(y1))


@dataclass(frozen=True)
class Constant:
    vector: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "vector", _vec2(self.vector))


@dataclass(frozen=True)
class GaussianRadial:
    center: tuple[float, float]
    peak_magnitude: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec2(self.center))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.peak_magnitude >= 0:
            raise ValueError(f"peak_magnitude must be >= 0, got {self.peak_magnitude}")


@dataclass(frozen=True)
class Sum:
    parts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True, eq=False)
class GridInterp:
    """Vectors sampled on a regular grid; ``values[j, i]`` sits at
    ``(origin_x + i * spacing, origin_y + j * spacing)``."""

    origin: tuple[float, float]
    spacing: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec2(self.origin))
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 3 or vals.shape[2] != 2 or min(vals.shape[:2]) < 1:
            raise ValueError(f"values must have shape (ny, nx, 2), got {vals.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def bounds(self) -> Bounds:
        ny, nx = self.values.shape[:2]
        x0, y0 = self.origin
        return Bounds(x0, x0 + (nx - 1) * self.spacing, y0, y0 + (ny - 1) * self.spacing)

    def __eq__(self, other):
        return (
            isinstance(other, GridInterp)
            and self.origin == other.origin
            and self.spacing == other.spacing
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.origin, self.spacing, self.values.tobytes()))


BiasFieldSpec = Union[Constant, GaussianRadial, Sum, GridInterp]


def _vec2(v) -> tuple[float, float]:
    x, y = (float(c) for c in v)
    return (x, y)


def eval_bias(spec: BiasFieldSpec, position) -> np.ndarray:
    """Bias vector of ``spec`` at a single position."""
    p = np.asarray(position, dtype=float)
    if p.shape != (2,):
        raise ValueError(f"position must be a 2-vector, got shape {p.shape}")
    return eval_bias_many(spec, p[None, :])[0]


def eval_bias_many(spec: BiasFieldSpec, positions) -> np.ndarray:
    """Vectorized ``eval_bias`` over an ``(N, 2)`` array; returns ``(N, 2)``."""
    pts = np.asarray(positions, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"positions must have shape (N, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("positions must be finite")
    return _eval(spec, pts)


def _eval(spec, pts: np.ndarray) -> np.ndarray:
    if isinstance(spec, Constant):
        return np.broadcast_to(np.array(spec.vector), pts.shape).copy()
    if isinstance(spec, GaussianRadial):
        d = pts - np.array(spec.center)
        r2 = np.einsum("ij,ij->i", d, d)
        r = np.sqrt(r2)
        mag = spec.peak_magnitude * np.exp(-r2 / (2.0 * spec.sigma ** 2))
        out = np.zeros_like(pts)
        nz = r > 0
        out[nz] = d[nz] * (mag[nz] / r[nz])[:, None]
        return out
    if isinstance(spec, Sum):
        out = np.zeros_like(pts)
        for part in spec.parts:
            out += _eval(part, pts)
        return out
    if isinstance(spec, GridInterp):
        return _bilinear(spec, pts)
    raise TypeError(f"unknown bias field spec {type(spec).__name__}")


def _bilinear(spec: GridInterp, pts: np.ndarray) -> np.ndarray:
    vals = spec.values
    ny, nx = vals.shape[:2]
    inside = spec.bounds.contains(pts, tol=1e-9 * spec.spacing)
    if not np.all(inside):
        bad = pts[~inside][0]
        raise DomainError(f"position {tuple(bad)} outside grid bounds {spec.bounds}")
    u = (pts[:, 0] - spec.origin[0]) / spec.spacing
    v = (pts[:, 1] - spec.origin[1]) / spec.spacing
    u = np.clip(u, 0.0, nx - 1)
    v = np.clip(v, 0.0, ny - 1)
    i0 = np.minimum(np.floor(u).astype(int), max(nx - 2, 0))
    j0 = np.minimum(np.floor(v).astype(int), max(ny - 2, 0))
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    fu = (u - i0)[:, None]
    fv = (v - j0)[:, None]
    return (
        vals[j0, i0] * (1 - fu) * (1 - fv)
        + vals[j0, i1] * fu * (1 - fv)
        + vals[j1, i0] * (1 - fu) * fv
        + vals[j1, i1] * fu * fv
    )


def sample_to_grid(spec: BiasFieldSpec, bounds: Bounds, spacing: float) -> GridInterp:
    """Tabulate ``spec`` on a regular grid anchored at the lower-left corner."""
    nx = _count(bounds.width, spacing)
    ny = _count(bounds.height, spacing)
    pts = make_eval_grid(bounds, spacing)
    values = eval_bias_many(spec, pts).reshape(ny, nx, 2)
    return GridInterp((bounds.xmin, bounds.ymin), spacing, values)


def _count(extent: float, spacing: float) -> int:
    return int(math.floor(extent / spacing + 1e-9)) + 1


def make_eval_grid(bounds: Bounds, spacing: float) -> np.ndarray:
    """Row-major grid (x varies fastest) covering ``bounds``, edges inclusive.

    Returns an ``(ny * nx, 2)`` array.
    """
    bounds = Bounds.from_value(bounds)
    if not spacing > 0:
        raise ValueError(f"spacing must be > 0, got {spacing}")
    if bounds.width == 0 and bounds.height == 0:
        raise ValueError("bounds are degenerate in both axes")
    xs = bounds.xmin + spacing * np.arange(_count(bounds.width, spacing))
    ys = bounds.ymin + spacing * np.arange(_count(bounds.height, spacing))
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def field_from_dict(d: dict) -> BiasFieldSpec:
    """Build a spec from its tagged-record form, e.g. ``{"type": "constant", "vector": [2, 0]}``."""
    kind = str(d["type"]).lower().replace("_", "")
    if kind == "constant":
        return Constant(tuple(d["vector"]))
    if kind == "gaussianradial":
        return GaussianRadial(tuple(d["center"]), float(d["peak_magnitude"]), float(d["sigma"]))
    if kind == "sum":
        return Sum(tuple(field_from_dict(p) for p in d["parts"]))
    if kind == "gridinterp":
        return GridInterp(tuple(d["origin"]), float(d["spacing"]), np.asarray(d["values"], dtype=float))
    raise ValueError(f"unknown field type {d['type']!r}")


def field_to_dict(spec: BiasFieldSpec) -> dict:
    if isinstance(spec, Constant):
        return {"type": "constant", "vector": list(spec.vector)}
    if isinstance(spec, GaussianRadial):
        return {"type": "gaussian_radial", "center": list(spec.center),
                "peak_magnitude": spec.peak_magnitude, "sigma": spec.sigma}
    if isinstance(spec, Sum):
        return {"type": "sum", "parts": [field_to_dict(p) for p in spec.parts]}
    if isinstance(spec, GridInterp):
        return {"type": "grid_interp", "origin": list(spec.origin), "spacing": spec.spacing,
                "values": spec.values.tolist()}
    raise TypeError(f"unknown bias field spec {type(spec).__name__}")
