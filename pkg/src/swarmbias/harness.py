"""Deterministic scenario execution, noise sweeps and planner comparisons.

One tick: every drone picks an action from its dead-reckoned estimate, moves,
then every drone senses. The new observations yield ``n * (n - 1)`` pair
deltas and ``n`` step deltas, so after ``k`` ticks the log holds ``k * n**2``
deltas. From ``sbe_start`` on, each tick re-solves the anchored bias problem
from scratch, refits the GP and scores the map; before that the all-zero map
is scored.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.stats

from . import exports
from .config import ScenarioConfig
from .field import eval_bias, eval_bias_many
from .gpr import GpModel, fit, optimize_hyperparams
from .ipp import (Route, RouteFollower, assign_routes, boustrophedon_routes, plan_ipp_routes,
                  replan_trigger, VarianceObjective)
from .metrics import RmseRecord, map_rmse, pooled_rmse
from .sbe import (AnchoringError, BiasEstimateSet, Delta, SolverError, build_graph,
                  make_pair_delta, make_step_delta, solve_biases)
from .sim import (Action, DroneEstimate, DroneState, dead_reckon, drone_rng, sense, step,
                  waypoint_controller)

log = logging.getLogger(__name__)


@dataclass
class PlanRecord:
    index: int
    time: float
    kind: str
    routes: list
    model_mean_variance: Optional[float] = None
    objective_initial: Optional[float] = None
    objective_final: Optional[float] = None


@dataclass
class ExperimentRecord:
    config: ScenarioConfig
    rmse: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    estimates: Optional[BiasEstimateSet] = None
    node_truth: Optional[np.ndarray] = None
    model: Optional[GpModel] = None
    map_grid: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)
    gp_subsampled: bool = False
    hyperparams_history: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_map_rmse(self) -> float:
        return self.rmse[-1].map_rmse

    @property
    def final_solver_rmse(self) -> Optional[float]:
        return self.rmse[-1].solver_rmse

    def rmse_at(self, t: float) -> RmseRecord:
        return min(self.rmse, key=lambda r: abs(r.time - t))

    def summary(self) -> dict:
        h = self.model.hyperparams if self.model is not None else self.config.gp
        return {
            "n_ticks": len(self.rmse),
            "n_deltas": len(self.deltas),
            "n_nodes": int(self.estimates.positions.shape[0]) if self.estimates is not None else 0,
            "final_map_rmse_m": self.final_map_rmse,
            "final_solver_rmse_m": self.final_solver_rmse,
            "rmse_convention": "pooled per-component: sqrt(mean(|err|^2)/2)",
            "hyperparams": {"lengthscale": h.lengthscale, "signal_variance": h.signal_variance,
                            "noise_variance": h.noise_variance},
            "gp_subsampled": self.gp_subsampled,
            "n_plans": len(self.plans),
            "plan_mean_variance": [p.model_mean_variance for p in self.plans],
            "warnings": list(self.warnings),
        }


class _Follower:
    """Route follower that, for open-loop planners, retraces its route on completion."""

    def __init__(self, route: Route, arrive_tol: float, loop: bool):
        self.inner = RouteFollower(route, arrive_tol)
        self.loop = loop

    @property
    def finished(self) -> bool:
        return self.inner.finished

    def update(self, position) -> Optional[Route]:
        self.inner.update(position)
        if self.loop and self.inner.finished:
            self.inner = RouteFollower(self.inner.route.reversed(), self.inner.arrive_tol)
            self.inner.update(position)
            return self.inner.route
        return None

    @property
    def target(self):
        return self.inner.target


def _subsample(n: int, cap: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, cap)).astype(int))


def run_scenario(cfg: ScenarioConfig, write: Optional[bool] = None) -> ExperimentRecord:
    """Run one scenario; exports go to ``cfg.output_dir`` when set (or ``write``)."""
    t_wall = time.perf_counter()
    n = cfg.n_drones
    dt = cfg.dt
    limits = (cfg.s_max, cfg.omega_max)
    pc = cfg.planner_cfg
    arrive_tol = pc.arrive_tol
    grid = cfg.eval_grid()
    rec = ExperimentRecord(cfg)

    rngs = [drone_rng(cfg.seed, i) for i in range(n)]
    states = [DroneState((x, y), th) for x, y, th in cfg.start_poses()]
    ests = [DroneEstimate.from_state(s) for s in states]
    obs = [sense(cfg.field, states, i, cfg.noise, rngs[i], 0) for i in range(n)]
    truth_pos = [s.position for s in states]
    rec.observations.append(_obs_rows(0, states, ests, obs))

    anchor_pos = obs[cfg.anchor_drone].gps
    anchor_bias = (np.asarray(cfg.anchor_bias, dtype=float) if cfg.anchor_bias is not None
                   else eval_bias(cfg.field, states[cfg.anchor_drone].position))

    model = GpModel.prior(cfg.gp)
    hyper = cfg.gp
    deltas: list[Delta] = []
    delta_truth: list[tuple] = []
    followers = _initial_plan(cfg, rec, model, ests)

    n_sbe = 0
    k_total = cfg.n_ticks
    for k in range(1, k_total + 1):
        actions = []
        for i in range(n):
            replaced = followers[i].update(ests[i].position)
            if replaced is not None:
                _log_plan(rec, k * dt, "retrace", {i: replaced})
            target = followers[i].target
            if target is None:
                actions.append(Action(0.0, 0.0, *limits))
            else:
                actions.append(waypoint_controller(ests[i], target, limits, dt, arrive_tol))

        prev_obs, prev_ests, prev_truth = obs, ests, truth_pos
        states = [step(states[i], actions[i], dt, cfg.noise, rngs[i]) for i in range(n)]
        ests = [dead_reckon(ests[i], actions[i], dt) for i in range(n)]
        obs = [sense(cfg.field, states, i, cfg.noise, rngs[i], k) for i in range(n)]
        truth_pos = [s.position for s in states]
        rec.observations.append(_obs_rows(k, states, ests, obs))

        for i in range(n):
            for j in range(n):
                if i != j:
                    deltas.append(make_pair_delta(obs[i], obs[j]))
                    delta_truth.append((truth_pos[i], truth_pos[j]))
        for i in range(n):
            deltas.append(make_step_delta(obs[i], prev_obs[i], ests[i], prev_ests[i]))
            delta_truth.append((truth_pos[i], prev_truth[i]))

        solver = None
        n_nodes = 0
        if k >= cfg.sbe_start_tick:
            try:
                graph = build_graph(deltas, anchor_pos, anchor_bias, cfg.merge_tol)
                est = solve_biases(graph)
            except (AnchoringError, SolverError) as exc:
                rec.warnings.append(f"tick {k}: bias solve failed: {exc}")
                est = None
            if est is not None:
                node_truth = _node_truth(graph, delta_truth)
                rec.estimates, rec.node_truth = est, node_truth
                n_nodes = graph.n_nodes
                pos, bias = est.positions[est.reachable], est.biases[est.reachable]
                solver = pooled_rmse(bias, eval_bias_many(cfg.field, node_truth[est.reachable]))
                keep = _subsample(len(pos), cfg.gp_max_nodes)
                if len(keep) < len(pos) and not rec.gp_subsampled:
                    rec.gp_subsampled = True
                    rec.warnings.append(f"tick {k}: GP training capped at {cfg.gp_max_nodes} nodes")
                    log.info("GP training set subsampled to %d of %d nodes", len(keep), len(pos))
                x_train, y_train = pos[keep], bias[keep]
                if cfg.gp_optimize and len(x_train) >= 3 and (
                        n_sbe % cfg.gp_optimize_every == 0 or k == k_total):
                    res = optimize_hyperparams(x_train, y_train, hyper, n_restarts=cfg.gp_restarts,
                                               seed=cfg.seed + k)
                    hyper = res.hyperparams
                    rec.hyperparams_history.append((k, hyper))
                model = fit(x_train, y_train, hyper)
                n_sbe += 1
            current_map = model if n_sbe else None
        else:
            current_map = None
        rec.rmse.append(RmseRecord(round(k * dt, 9), solver, map_rmse(current_map, cfg.field, grid),
                                   len(deltas), n_nodes))

        if cfg.planner == "ipp":
            for i in range(n):
                followers[i].update(ests[i].position)
            if replan_trigger([f.inner for f in followers]) and k < k_total:
                followers = _ipp_plan(cfg, rec, model, ests, k * dt)

    rec.deltas = deltas
    rec.model = model
    means, var = model.predict(grid) if n_sbe else (np.zeros_like(grid), np.full(len(grid), hyper.signal_variance))
    rec.map_grid = np.column_stack([grid, means, var])
    rec.wall_time = time.perf_counter() - t_wall

    out = cfg.output_dir if write is None or write else None
    if write and out is None:
        raise ValueError("write=True needs cfg.output_dir")
    if out:
        write_outputs(rec, out)
    return rec


def _initial_plan(cfg, rec, model, ests):
    n = cfg.n_drones
    tol = cfg.planner_cfg.arrive_tol
    positions = [e.position for e in ests]
    if cfg.planner == "ipp":
        return _ipp_plan(cfg, rec, model, ests, 0.0)
    if cfg.planner == "boustrophedon":
        routes = boustrophedon_routes(cfg.bounds, n, cfg.planner_cfg.lane_spacing)
        perm = assign_routes(routes, positions)
        routes = [routes[perm[i]] for i in range(n)]
    else:
        routes = [Route(w) for w in cfg.waypoints]
    _log_plan(rec, 0.0, cfg.planner, dict(enumerate(routes)))
    return [_Follower(r, tol, loop=True) for r in routes]


def _ipp_plan(cfg, rec, model, ests, t):
    positions = [e.position for e in ests]
    routes, info = plan_ipp_routes(model, cfg.planner_cfg, positions)
    mean_var = VarianceObjective(model, cfg.planner_cfg.candidate_grid()).current()
    plan = _log_plan(rec, t, "ipp", dict(enumerate(routes)))
    plan.model_mean_variance = mean_var
    plan.objective_initial = info.initial_objective
    plan.objective_final = info.objective
    return [_Follower(r, cfg.planner_cfg.arrive_tol, loop=False) for r in routes]


def _log_plan(rec, t, kind, routes: dict) -> PlanRecord:
    plan = PlanRecord(len(rec.plans), round(t, 9), kind, sorted(routes.items()))
    rec.plans.append(plan)
    return plan


def _node_truth(graph, delta_truth) -> np.ndarray:
    """True position behind each graph node (first delta endpoint that created it)."""
    out = np.full((graph.n_nodes, 2), np.nan)
    seen = np.zeros(graph.n_nodes, dtype=bool)
    for e, (t1, t2) in enumerate(delta_truth):
        a, b = graph.edges[e]
        if not seen[a]:
            out[a], seen[a] = t1, True
        if not seen[b]:
            out[b], seen[b] = t2, True
    return out


def _obs_rows(k, states, ests, obs):
    rows = []
    for s, e, o in zip(states, ests, obs):
        row = [k, o.drone_id, s.position[0], s.position[1], e.position[0], e.position[1],
               o.gps[0], o.gps[1]]
        for slot in range(len(o.ranges)):
            row += [o.peer_ids[slot], o.ranges[slot], o.bearings[slot, 0], o.bearings[slot, 1]]
        rows.append(row)
    return rows


def write_outputs(rec: ExperimentRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = rec.config
    exports.write_csv(
        out / "rmse.csv",
        ["time_s", "solver_rmse_m", "map_rmse_m", "n_deltas", "n_nodes", "planner", "seed"],
        ([r.time, r.solver_rmse, r.map_rmse, r.n_deltas, r.n_nodes, cfg.planner, cfg.seed] for r in rec.rmse),
    )
    exports.write_csv(out / "map_grid.csv", ["x", "y", "mean_bx", "mean_by", "variance"], rec.map_grid)
    exports.write_csv(
        out / "deltas.csv",
        ["p1x", "p1y", "p2x", "p2y", "dx", "dy", "kind", "timestep"],
        ([d.p1[0], d.p1[1], d.p2[0], d.p2[1], d.delta[0], d.delta[1], d.kind, d.timestep] for d in rec.deltas),
    )
    route_rows = []
    for plan in rec.plans:
        for drone, route in plan.routes:
            for order, (x, y) in enumerate(route.waypoints):
                route_rows.append([plan.index, drone, order, x, y])
    exports.write_csv(out / "routes.csv", ["plan_index", "drone_id", "waypoint_order", "x", "y"], route_rows)
    if rec.estimates is not None:
        est = rec.estimates
        exports.write_csv(
            out / "biases.csv",
            ["x", "y", "bx", "by", "reachable", "truth_x", "truth_y"],
            ([p[0], p[1], b[0], b[1], bool(r), t[0], t[1]]
             for p, b, r, t in zip(est.positions, est.biases, est.reachable, rec.node_truth)),
        )
    n = cfg.n_drones
    header = ["k", "id", "truth_x", "truth_y", "est_x", "est_y", "gps_x", "gps_y"]
    for slot in range(n - 1):
        header += [f"peer_{slot}", f"range_{slot}", f"bearing_x_{slot}", f"bearing_y_{slot}"]
    exports.write_csv(out / "observations.csv", header, (row for tick in rec.observations for row in tick))
    if rec.model is not None:
        save_model(rec.model, out / "model.npz")
    exports.write_json(out / "record.json", {"config": cfg.to_dict(), "summary": rec.summary()})
    exports.write_json(out / "timing.json", {"wall_clock_s": rec.wall_time})
    return out


def save_model(model: GpModel, path) -> None:
    h = model.hyperparams
    np.savez(path, train_inputs=model.train_inputs, train_targets=model.train_targets,
             hyperparams=np.array([h.lengthscale, h.signal_variance, h.noise_variance]))


def load_model(path) -> GpModel:
    from .gpr import Hyperparams
    with np.load(path) as data:
        ell, sf2, sn2 = data["hyperparams"]
        return fit(data["train_inputs"], data["train_targets"], Hyperparams(float(ell), float(sf2), float(sn2)))


@dataclass
class SweepResult:
    runs: list  # dicts: sigma, seed, solver_rmse, map_rmse, error
    table: list  # dicts: sigma, mean/min/max solver and map rmse, n_ok

    def mean_solver(self) -> np.ndarray:
        return np.array([row["mean_solver_rmse"] for row in self.table])

    def spearman(self) -> float:
        sig = [row["sigma"] for row in self.table]
        return float(scipy.stats.spearmanr(sig, self.mean_solver()).statistic)


def run_noise_sweep(base: ScenarioConfig, sigmas, seeds, out_dir=None) -> SweepResult:
    sigmas, seeds = list(sigmas), list(seeds)
    if not sigmas or not seeds:
        raise ValueError("sweep needs at least one sigma and one seed")
    runs = []
    for sigma in sigmas:
        for seed in seeds:
            cfg = replace(base, noise=replace(base.noise, process_sigma=float(sigma)), seed=int(seed),
                          output_dir=None)
            row = {"sigma": float(sigma), "seed": int(seed), "solver_rmse": None, "map_rmse": None, "error": ""}
            try:
                rec = run_scenario(cfg, write=False)
                row["solver_rmse"] = rec.final_solver_rmse
                row["map_rmse"] = rec.final_map_rmse
            except Exception as exc:  # one bad cell must not sink the sweep
                row["error"] = f"{type(exc).__name__}: {exc}"
                log.warning("sweep cell sigma=%g seed=%d failed: %s", sigma, seed, exc)
            runs.append(row)
    table = []
    for sigma in sigmas:
        cell = [r for r in runs if r["sigma"] == float(sigma) and not r["error"] and r["solver_rmse"] is not None]
        s = np.array([r["solver_rmse"] for r in cell]) if cell else np.array([np.nan])
        m = np.array([r["map_rmse"] for r in cell]) if cell else np.array([np.nan])
        table.append({
            "sigma": float(sigma), "n_ok": len(cell),
            "mean_solver_rmse": float(np.mean(s)), "min_solver_rmse": float(np.min(s)),
            "max_solver_rmse": float(np.max(s)),
            "mean_map_rmse": float(np.mean(m)), "min_map_rmse": float(np.min(m)),
            "max_map_rmse": float(np.max(m)),
        })
    result = SweepResult(runs, table)
    if out_dir is not None:
        out = Path(out_dir)
        keys = list(table[0])
        exports.write_csv(out / "sweep.csv", keys, ([row[k] for k in keys] for row in table))
        keys = list(runs[0])
        exports.write_csv(out / "sweep_runs.csv", keys, ([row[k] for k in keys] for row in runs))
    return result


@dataclass
class ComparisonResult:
    times: np.ndarray
    traces: dict  # planner -> (n_seeds, n_times) map RMSE
    seeds: list
    records: dict = field(default_factory=dict)  # planner -> list of ExperimentRecord

    def mean(self, planner: str) -> np.ndarray:
        return self.traces[planner].mean(axis=0)

    def mean_at(self, planner: str, t: float) -> float:
        idx = int(np.argmin(np.abs(self.times - t)))
        return float(self.mean(planner)[idx])


def run_comparison(cfg_ipp: ScenarioConfig, cfg_bous: ScenarioConfig, seeds, out_dir=None,
                   keep_records: bool = False) -> ComparisonResult:
    a = cfg_ipp.to_dict()
    b = cfg_bous.to_dict()
    for d in (a, b):
        d.pop("planner")
        d.pop("output_dir")
        d.pop("seed")
    if a != b:
        diff = sorted(k for k in a if a[k] != b.get(k))
        raise ValueError(f"comparison configs differ beyond the planner: {diff}")
    seeds = list(seeds)
    traces, records = {}, {}
    times = None
    for cfg in (cfg_ipp, cfg_bous):
        rows, recs = [], []
        for seed in seeds:
            rec = run_scenario(replace(cfg, seed=int(seed), output_dir=None), write=False)
            rows.append([r.map_rmse for r in rec.rmse])
            times = np.array([r.time for r in rec.rmse])
            if keep_records:
                recs.append(rec)
        traces[cfg.planner] = np.array(rows)
        records[cfg.planner] = recs
    result = ComparisonResult(times, traces, seeds, records)
    if out_dir is not None:
        out = Path(out_dir)
        long_rows = [[t, planner, seed, v]
                     for planner, arr in traces.items()
                     for seed, trace in zip(seeds, arr)
                     for t, v in zip(times, trace)]
        exports.write_csv(out / "comparison_runs.csv", ["time_s", "planner", "seed", "map_rmse_m"], long_rows)
        planners = list(traces)
        exports.write_csv(out / "comparison_mean.csv", ["time_s"] + [f"{p}_mean_map_rmse_m" for p in planners],
                          ([t] + [float(result.mean(p)[i]) for p in planners] for i, t in enumerate(times)))
    return result
