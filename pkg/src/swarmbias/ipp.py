"""Informative path planning over the GP variance field.

Planning round:

1. ``optimize_inducing_points`` places ``n * p`` virtual measurement points so
   that, if noiseless readings were taken there, the mean posterior variance
   over a candidate grid would be as small as possible.
2. ``partition_routes`` splits them into ``n`` balanced routes of ``p`` points.
3. ``assign_routes`` pairs drones with routes by solving a linear assignment on
   the drone-to-route-start distances.

``boustrophedon_routes`` provides the open-loop lawnmower baseline.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .field import Bounds, make_eval_grid
from .gpr import GpModel

HYPOTHETICAL_JITTER = 1e-6  # relative to signal variance


@dataclass(frozen=True)
class PlannerConfig:
    n_drones: int = 3
    points_per_drone: int = 3
    bounds: Bounds = field(default_factory=lambda: Bounds(0.0, 50.0, 0.0, 50.0))
    candidate_grid_spacing: float = 2.5
    step_size: float = 0.5
    max_iters: int = 100
    tolerance: float = 1e-7
    lane_spacing: float = 10.0
    arrive_tol: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "bounds", Bounds.from_value(self.bounds))
        if self.n_drones < 1 or self.points_per_drone < 1:
            raise ValueError("n_drones and points_per_drone must be >= 1")
        for name in ("candidate_grid_spacing", "lane_spacing", "step_size", "arrive_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def n_points(self) -> int:
        return self.n_drones * self.points_per_drone

    def candidate_grid(self) -> np.ndarray:
        return make_eval_grid(self.bounds, self.candidate_grid_spacing)


@dataclass(frozen=True, eq=False)
class Route:
    waypoints: np.ndarray

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float).reshape(-1, 2)
        if len(wp) == 0:
            raise ValueError("a route needs at least one waypoint")
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)

    def __len__(self):
        return len(self.waypoints)

    def __getitem__(self, i):
        return self.waypoints[i]

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    def reversed(self) -> "Route":
        return Route(self.waypoints[::-1])

    def inside(self, bounds: Bounds) -> bool:
        return bool(np.all(bounds.contains(self.waypoints)))


class VarianceObjective:
    """Mean posterior variance over a fixed grid after hypothetical noiseless
    measurements at a set of points ``Z``.

    With ``c(x) = k_post(Z, x)`` and ``S = k_post(Z, Z)``::

        J(Z) = mean_x [ v(x) - c(x)^T S^-1 c(x) ]

    where ``k_post`` / ``v`` are the posterior covariance / variance of the
    current model. The gradient w.r.t. ``Z`` is analytic.
    """

    def __init__(self, model: GpModel, grid: np.ndarray):
        self.model = model
        self.grid = np.asarray(grid, dtype=float).reshape(-1, 2)
        if len(self.grid) == 0:
            raise ValueError("empty candidate grid")
        h = model.hyperparams
        self.ell2 = h.lengthscale ** 2
        self.sf2 = h.signal_variance
        self.jitter = HYPOTHETICAL_JITTER * h.signal_variance
        self.xt = model.train_inputs
        self.w_grid = model.whiten(self.grid)
        self.g_grid = self._unwhiten(self.w_grid)
        self.base_var = self.sf2 - np.einsum("ij,ij->j", self.w_grid, self.w_grid)

    def _unwhiten(self, w: np.ndarray) -> np.ndarray:
        # K^-1 k(X_t, Y) = L^-T (L^-1 k(X_t, Y))
        if self.model.n_train == 0:
            return w
        return scipy.linalg.solve_triangular(self.model.chol, w, lower=True, trans="T", check_finite=False)

    def current(self) -> float:
        """Mean variance with no hypothetical measurements."""
        return float(np.mean(self.base_var))

    def _terms(self, z: np.ndarray):
        k_zx = self.model.kernel(z, self.grid)
        k_zz = self.model.kernel(z, z)
        w_z = self.model.whiten(z)
        c = k_zx - w_z.T @ self.w_grid
        s = k_zz - w_z.T @ w_z + self.jitter * np.eye(len(z))
        chol = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
        w = scipy.linalg.cho_solve(chol, c, check_finite=False)
        reduction = np.einsum("ij,ij->j", c, w)
        return k_zx, k_zz, w_z, w, reduction

    def value(self, z) -> float:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        *_, reduction = self._terms(z)
        return float(np.mean(self.base_var - reduction))

    def value_and_grad(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        k_zx, k_zz, w_z, w, reduction = self._terms(z)
        val = float(np.mean(self.base_var - reduction))
        m = w @ w.T
        g_z = self._unwhiten(w_z)
        k_zt = self.model.kernel(z, self.xt) if self.model.n_train else None
        grad = np.empty_like(z)
        for c in range(2):
            d_grid = k_zx * (self.grid[None, :, c] - z[:, c, None]) / self.ell2
            d_self = k_zz * (z[None, :, c] - z[:, c, None]) / self.ell2
            if k_zt is not None:
                dt = k_zt * (self.xt[None, :, c] - z[:, c, None]) / self.ell2
                d_grid = d_grid - dt @ self.g_grid
                d_self = d_self - dt @ g_z
            grad[:, c] = np.sum(w * d_grid, axis=1) - np.sum(m * d_self, axis=1)
        grad *= -2.0 / len(self.grid)
        return val, grad


def farthest_point_sample(points: np.ndarray, k: int, first: int = 0) -> np.ndarray:
    """Indices of ``k`` points chosen greedily to maximize the minimum spacing."""
    pts = np.asarray(points, dtype=float)
    k = min(k, len(pts))
    chosen = [first]
    dmin = np.linalg.norm(pts - pts[first], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(chosen, dtype=int)


def initial_points(model: GpModel, cfg: PlannerConfig, pool_fraction: float = 0.25) -> np.ndarray:
    """Highest-variance candidates, spread out by farthest-point sampling.

    The pool is the top ``pool_fraction`` of candidates by variance. Sampling
    starts from the highest-variance candidate, ties going to the one nearest
    the pool centroid.
    """
    grid = cfg.candidate_grid()
    _, var = model.predict(grid)
    n_pool = max(cfg.n_points, int(math.ceil(pool_fraction * len(grid))))
    n_pool = min(n_pool, len(grid))
    rounded = np.round(var / model.hyperparams.signal_variance, 9)
    order = np.lexsort((np.arange(len(grid)), -rounded))
    pool = grid[order[:n_pool]]
    top = rounded[order[0]]
    centroid = pool.mean(axis=0)
    ties = np.flatnonzero(rounded[order[:n_pool]] == top)
    first = int(ties[np.argmin(np.linalg.norm(pool[ties] - centroid, axis=1))])
    return pool[farthest_point_sample(pool, cfg.n_points, first)]


@dataclass
class InducingResult:
    points: np.ndarray
    objective: float
    initial_objective: float
    history: list
    iterations: int


def optimize_inducing_points(model: GpModel, cfg: PlannerConfig, init=None,
                             return_info: bool = False):
    """Projected gradient descent on the variance objective.

    Each iteration moves the points along the negative gradient, scaled so the
    farthest-moving point travels ``step_size``, then projects onto the
    bounds. A step that fails to lower the objective is halved until it does
    or becomes negligible, so the objective never increases.
    """
    grid = cfg.candidate_grid()
    if len(grid) == 0:
        raise ValueError("empty candidate grid")
    objective = VarianceObjective(model, grid)
    z = initial_points(model, cfg) if init is None else np.array(init, dtype=float).reshape(-1, 2)
    z = cfg.bounds.clip(z)
    val, grad = objective.value_and_grad(z)
    j0 = val
    history = [val]
    step = cfg.step_size
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gmax = np.max(np.linalg.norm(grad, axis=1))
        if not gmax > 0:
            break
        direction = -grad / gmax
        accepted = False
        while step > 1e-4 * cfg.step_size:
            trial = cfg.bounds.clip(z + step * direction)
            tval = objective.value(trial)
            if tval < val:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = val - tval
        z = trial
        val, grad = objective.value_and_grad(z)
        history.append(val)
        step = min(cfg.step_size, step * 1.5)
        if improvement < cfg.tolerance:
            break
    result = InducingResult(z, val, j0, history, it)
    return result if return_info else z


def _assign_with_capacity(points: np.ndarray, centers: np.ndarray, capacity: int) -> np.ndarray:
    d = cdist(points, centers)
    labels = np.full(len(points), -1, dtype=int)
    load = np.zeros(len(centers), dtype=int)
    # stable sort keeps (point, center) index order on exact distance ties
    for flat in np.argsort(d, axis=None, kind="stable"):
        i, c = divmod(int(flat), len(centers))
        if labels[i] < 0 and load[c] < capacity:
            labels[i] = c
            load[c] += 1
    return labels


def _nn_chain(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    current = int(np.argmin(np.linalg.norm(points - centroid, axis=1)))
    order = [current]
    left = set(range(len(points))) - {current}
    while left:
        rest = sorted(left)
        d = np.linalg.norm(points[rest] - points[current], axis=1)
        current = rest[int(np.argmin(d))]
        order.append(current)
        left.remove(current)
    return points[order]


def partition_routes(points, n: int, p: int, refine_sweeps: int = 2) -> list[Route]:
    """Balanced clustering of ``n * p`` points into ``n`` routes of ``p`` points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) != n * p:
        raise ValueError(f"expected n*p = {n * p} points, got {len(pts)}")
    first = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    centers = pts[farthest_point_sample(pts, n, first)]
    labels = _assign_with_capacity(pts, centers, p)
    for _ in range(refine_sweeps):
        centers = np.array([pts[labels == c].mean(axis=0) for c in range(n)])
        labels = _assign_with_capacity(pts, centers, p)
    return [Route(_nn_chain(pts[labels == c])) for c in range(n)]


def assignment_cost(routes, positions) -> np.ndarray:
    starts = np.array([r.start for r in routes], dtype=float).reshape(-1, 2)
    return cdist(np.asarray(positions, dtype=float).reshape(-1, 2), starts)


def solve_assignment(cost) -> np.ndarray:
    """Optimal permutation for a square cost matrix; exact-cost ties go to the
    lexicographically smallest permutation."""
    c = np.asarray(cost, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {c.shape}")
    if n == 0:
        return np.empty(0, dtype=int)
    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * (1.0 + abs(best))
    perm = np.empty(n, dtype=int)
    free_cols = list(range(n))
    fixed = 0.0
    for i in range(n):
        for j in free_cols:
            rest_cols = [q for q in free_cols if q != j]
            sub = c[np.ix_(range(i + 1, n), rest_cols)]
            sub_cost = float(sub[linear_sum_assignment(sub)].sum()) if sub.size else 0.0
            if fixed + c[i, j] + sub_cost <= best + tol:
                perm[i] = j
                fixed += c[i, j]
                free_cols = rest_cols
                break
    return perm


def assign_routes(routes, positions) -> np.ndarray:
    """``perm[i]`` is the index of the route given to drone ``i``."""
    if len(routes) != len(positions):
        raise ValueError(f"{len(routes)} routes for {len(positions)} drones")
    return solve_assignment(assignment_cost(routes, positions))


def brute_force_assignment(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=float)
    n = c.shape[0]
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(c[i, perm[i]] for i in range(n))
        if total < best - 1e-9 * (1.0 + abs(best)) or best_perm is None:
            best, best_perm = total, perm
    return np.array(best_perm, dtype=int)


_CORNERS = {
    "lower_left": (False, False),
    "lower_right": (True, False),
    "upper_left": (False, True),
    "upper_right": (True, True),
}


def _lane_offsets(height: float, spacing: float) -> list[float]:
    if spacing >= height:
        return [height / 2.0]
    count = int(math.floor(height / spacing + 1e-9))
    offs = [i * spacing for i in range(count + 1)]
    if height - offs[-1] > 1e-9 * max(1.0, height):
        offs.append(height)
    return offs


def boustrophedon_path(bounds, lane_spacing: float, start_corner: str = "lower_left") -> Route:
    """Serpentine lanes parallel to x, ``lane_spacing`` apart, endpoints only.

    Lanes start on the ``start_corner`` edge. If the spacing is at least the
    height, a single lane runs along the middle so coverage stays within half
    a spacing.
    """
    b = Bounds.from_value(bounds)
    if not lane_spacing > 0:
        raise ValueError("lane_spacing must be > 0")
    flip_x, flip_y = _CORNERS[start_corner]
    offs = _lane_offsets(b.height, lane_spacing)
    ys = [b.ymax - o for o in offs] if flip_y else [b.ymin + o for o in offs]
    xa, xb = (b.xmax, b.xmin) if flip_x else (b.xmin, b.xmax)
    wps = []
    for lane, y in enumerate(ys):
        ends = (xa, xb) if lane % 2 == 0 else (xb, xa)
        wps.append((ends[0], y))
        wps.append((ends[1], y))
    return Route(np.array(wps))


def boustrophedon_routes(bounds, n: int, lane_spacing: float, start_corner: str = "lower_left") -> list[Route]:
    """One serpentine per horizontal band, bands of equal height, bottom to top."""
    b = Bounds.from_value(bounds)
    h = b.height / n
    return [
        boustrophedon_path(Bounds(b.xmin, b.xmax, b.ymin + i * h, b.ymin + (i + 1) * h),
                           lane_spacing, start_corner)
        for i in range(n)
    ]


class RouteFollower:
    """Tracks one drone's progress along its route."""

    def __init__(self, route: Route, arrive_tol: float = 0.5):
        self.route = route
        self.arrive_tol = arrive_tol
        self.index = 0

    @property
    def finished(self) -> bool:
        return self.index >= len(self.route)

    @property
    def target(self):
        return None if self.finished else self.route[self.index]

    def update(self, position) -> None:
        """Advance past every waypoint already within ``arrive_tol``."""
        pos = np.asarray(position, dtype=float)
        while not self.finished and np.linalg.norm(self.route[self.index] - pos) <= self.arrive_tol:
            self.index += 1


def replan_trigger(followers) -> bool:
    return bool(followers) and all(f.finished for f in followers)


def plan_ipp_routes(model: GpModel, cfg: PlannerConfig, positions):
    """One full planning round: returns (routes indexed by drone, optimizer info)."""
    info = optimize_inducing_points(model, cfg, return_info=True)
    routes = partition_routes(info.points, cfg.n_drones, cfg.points_per_drone)
    perm = assign_routes(routes, positions)
    return [routes[perm[i]] for i in range(cfg.n_drones)], info
