"""State bias estimation from relative GPS deltas.

A delta ``(p1, p2, d)`` states that ``bias(p1) - bias(p2) ~= d``. Deltas come
from two sources:

* pair deltas: two drones at the same tick, ``g_i - g_j - r_ij * b_ij``
* step deltas: one drone across consecutive ticks,
  ``(g_k - phat_k) - (g_{k-1} - phat_{k-1})``

Positions are merged into graph nodes, one node is pinned to a known bias,
and the remaining biases minimize the summed squared delta residuals. The x
and y components decouple, so each is a scalar problem on the anchored graph
Laplacian.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from .sim import DroneEstimate, Observation

DENSE_SOLVE_LIMIT = 2000


class AnchoringError(ValueError):
    """The anchor position does not coincide with any delta endpoint."""


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Delta:
    p1: np.ndarray
    p2: np.ndarray
    delta: np.ndarray
    kind: str = "pair"
    timestep: int = -1

    def __post_init__(self):
        for name in ("p1", "p2", "delta"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"delta {name} must be finite, got {v}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclass(eq=False)
class DeltaGraph:
    nodes: np.ndarray  # (N, 2) canonical positions
    edges: np.ndarray  # (E, 2) int node indices (a, b)
    deltas: np.ndarray  # (E, 2)
    anchor: int
    anchor_bias: np.ndarray
    merge_tol: float = 1e-6

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass(eq=False)
class BiasEstimateSet:
    positions: np.ndarray  # (N, 2)
    biases: np.ndarray  # (N, 2); NaN where unreachable
    reachable: np.ndarray  # (N,) bool
    anchor: int = 0

    def reachable_items(self):
        return self.positions[self.reachable], self.biases[self.reachable]


def make_pair_delta(obs_i: Observation, obs_j: Observation) -> Delta:
    if obs_i.timestep != obs_j.timestep:
        raise ValueError(f"pair delta needs one timestep, got {obs_i.timestep} and {obs_j.timestep}")
    if obs_i.drone_id == obs_j.drone_id:
        raise ValueError("pair delta needs two distinct drones")
    j = obs_j.drone_id
    rel = obs_i.range_to(j) * obs_i.bearing_to(j)
    return Delta(obs_i.gps, obs_j.gps, obs_i.gps - obs_j.gps - rel, "pair", obs_i.timestep)


def make_step_delta(obs_k: Observation, obs_prev: Observation,
                    est_k: DroneEstimate, est_prev: DroneEstimate) -> Delta:
    if obs_k.drone_id != obs_prev.drone_id:
        raise ValueError("step delta needs observations from one drone")
    if obs_k.timestep != obs_prev.timestep + 1:
        raise ValueError(f"step delta needs consecutive ticks, got {obs_prev.timestep} -> {obs_k.timestep}")
    d = (obs_k.gps - est_k.position) - (obs_prev.gps - est_prev.position)
    return Delta(obs_k.gps, obs_prev.gps, d, "step", obs_k.timestep)


def _merge_points(points: np.ndarray, tol: float):
    """First-come merge: each point joins the nearest earlier canonical point
    within ``tol`` (lowest index on ties), else becomes canonical itself.

    Returns ``(canonical_positions, label_per_point)``.
    """
    uniq, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")  # unique points in order of first appearance
    uniq = uniq[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    inverse = rank[inverse]

    label = np.arange(len(uniq))
    if tol > 0 and len(uniq) > 1:
        tree = cKDTree(uniq)
        pairs = tree.query_pairs(tol, output_type="ndarray")
        if len(pairs):
            close: dict[int, list[int]] = {}
            for u, v in pairs:
                close.setdefault(int(max(u, v)), []).append(int(min(u, v)))
            for u in sorted(close):
                best, best_d = None, math.inf
                for v in sorted(close[u]):
                    if label[v] != v:
                        continue
                    d = math.hypot(*(uniq[u] - uniq[v]))
                    if d <= tol and d < best_d:
                        best, best_d = v, d
                if best is not None:
                    label[u] = best
    canon = np.flatnonzero(label == np.arange(len(uniq)))
    node_of = np.full(len(uniq), -1, dtype=np.int64)
    node_of[canon] = np.arange(len(canon))
    return uniq[canon], node_of[label][inverse]


def build_graph(deltas, anchor_position, anchor_bias, merge_tol: float = 1e-6) -> DeltaGraph:
    if merge_tol < 0:
        raise ValueError("merge_tol must be >= 0")
    deltas = list(deltas)
    if not deltas:
        raise ValueError("build_graph needs at least one delta")
    ends = np.empty((2 * len(deltas), 2))
    ends[0::2] = [d.p1 for d in deltas]
    ends[1::2] = [d.p2 for d in deltas]
    values = np.array([d.delta for d in deltas], dtype=float).reshape(-1, 2)
    nodes, labels = _merge_points(ends, merge_tol)
    edges = labels.reshape(-1, 2)

    anchor_pos = np.asarray(anchor_position, dtype=float).reshape(2)
    dist = np.linalg.norm(nodes - anchor_pos, axis=1)
    anchor = int(np.argmin(dist))
    if not dist[anchor] <= merge_tol:
        raise AnchoringError(f"anchor position {tuple(anchor_pos)} matches no delta endpoint within {merge_tol}")
    bias = np.array(anchor_bias, dtype=float).reshape(2)
    return DeltaGraph(nodes, edges, values, anchor, bias, merge_tol)


def connected_component(graph: DeltaGraph) -> np.ndarray:
    """Nodes reachable from the anchor through undirected edges."""
    n = graph.n_nodes
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in graph.edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(n, dtype=bool)
    seen[graph.anchor] = True
    queue = deque([graph.anchor])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return seen


def solve_biases(graph: DeltaGraph, dense_limit: int = DENSE_SOLVE_LIMIT,
                 cg_tol: float = 1e-12) -> BiasEstimateSet:
    """Anchored least-squares bias estimates for every anchor-reachable node.

    Writing ``b = anchor_bias + x`` turns the constrained problem into
    ``L_ff x = r_f`` where ``L`` is the edge Laplacian restricted to free
    reachable nodes and ``r`` accumulates ``+d`` at each edge's first node and
    ``-d`` at its second. The anchor offset never enters the solve, so shifting
    the anchor shifts every estimate by the same vector.
    """
    reach = connected_component(graph)
    n = graph.n_nodes
    biases = np.full((n, 2), np.nan)
    biases[graph.anchor] = graph.anchor_bias

    free = np.flatnonzero(reach)
    free = free[free != graph.anchor]
    if free.size:
        local = np.full(n, -1, dtype=np.int64)
        local[free] = np.arange(free.size)
        a, b = graph.edges[:, 0], graph.edges[:, 1]
        # self-loops add a constant to the objective and nothing to the system
        keep = reach[a] & (a != b)
        a, b, dv = a[keep], b[keep], graph.deltas[keep]
        la, lb = local[a], local[b]
        m = free.size

        rhs = np.zeros((m, 2))
        np.add.at(rhs, la[la >= 0], dv[la >= 0])
        np.subtract.at(rhs, lb[lb >= 0], dv[lb >= 0])

        deg = np.zeros(m)
        np.add.at(deg, la[la >= 0], 1.0)
        np.add.at(deg, lb[lb >= 0], 1.0)
        both = (la >= 0) & (lb >= 0)
        rows = np.concatenate([la[both], lb[both]])
        cols = np.concatenate([lb[both], la[both]])
        off = scipy.sparse.coo_matrix((-np.ones(rows.size), (rows, cols)), shape=(m, m))
        lap = (off + scipy.sparse.diags(deg)).tocsr()

        if m <= dense_limit:
            x = _dense_solve(lap.toarray(), rhs)
        else:
            x = _cg_solve(lap, rhs, cg_tol)
        biases[free] = graph.anchor_bias + x

    return BiasEstimateSet(graph.nodes.copy(), biases, reach, graph.anchor)


def _dense_solve(lap: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(lap, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"anchored Laplacian ({lap.shape[0]} nodes) is not positive definite: {exc}") from exc
    diag = np.diag(factor[0])
    cond_proxy = (diag.max() / diag.min()) ** 2
    if not np.isfinite(cond_proxy) or cond_proxy > 1e14:
        raise SolverError(f"anchored Laplacian is ill-conditioned (pivot ratio^2 {cond_proxy:.3g})")
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def _cg_solve(lap, rhs: np.ndarray, tol: float) -> np.ndarray:
    out = np.empty_like(rhs)
    precond = scipy.sparse.diags(1.0 / lap.diagonal())
    for c in range(rhs.shape[1]):
        x, info = scipy.sparse.linalg.cg(lap, rhs[:, c], rtol=tol, atol=0.0,
                                         maxiter=10 * lap.shape[0], M=precond)
        if info != 0:
            raise SolverError(f"conjugate gradient did not converge (info={info}) on component {c}")
        out[:, c] = x
    return out


def objective(graph: DeltaGraph, biases: np.ndarray) -> float:
    """Summed squared residual ``C`` over the edges whose nodes all have estimates."""
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    res = biases[a] - biases[b] - graph.deltas
    ok = np.all(np.isfinite(res), axis=1)
    return float(np.sum(res[ok] ** 2))
