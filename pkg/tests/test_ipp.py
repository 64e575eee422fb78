import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_assignment
from swarmbias.field import Bounds, make_eval_grid
from swarmbias.gpr import GpModel, Hyperparams, fit
from swarmbias.ipp import (PlannerConfig, Route, RouteFollower, VarianceObjective, assign_routes,
                           assignment_cost, boustrophedon_path, boustrophedon_routes,
                           brute_force_assignment, initial_points, optimize_inducing_points,
                           partition_routes, plan_ipp_routes, replan_trigger, solve_assignment)


def left_half_model():
    rng = np.random.default_rng(0)
    x = np.c_[rng.uniform(0, 25, 150), rng.uniform(0, 50, 150)]
    return fit(x, rng.normal(scale=0.5, size=(150, 2)))


def test_objective_gradient_matches_finite_differences():
    model = left_half_model()
    obj = VarianceObjective(model, make_eval_grid(Bounds(0, 50, 0, 50), 5.0))
    z = np.array([[30.0, 10.0], [40.0, 35.0], [12.0, 20.0]])
    _, g = obj.value_and_grad(z)
    eps = 1e-5
    fd = np.zeros_like(z)
    for i in range(3):
        for c in range(2):
            e = np.zeros_like(z)
            e[i, c] = eps
            fd[i, c] = (obj.value(z + e) - obj.value(z - e)) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


def test_objective_matches_refit_with_hypothetical_points():
    # noiseless hypothetical observations = refit with near-zero noise at Z
    h = Hyperparams(8.0, 3.0, 0.05)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 30, (10, 2))
    model = fit(x, rng.normal(size=(10, 2)), h)
    grid = make_eval_grid(Bounds(0, 30, 0, 30), 3.0)
    z = rng.uniform(0, 30, (3, 2))
    obj = VarianceObjective(model, grid)
    kk = lambda a, b: h.signal_variance * np.exp(-((a[:, None] - b[None]) ** 2).sum(-1) / (2 * h.lengthscale ** 2))
    xa = np.vstack([x, z])
    noise = np.r_[np.full(10, h.noise_variance), np.full(3, obj.jitter)]
    k = kk(xa, xa) + np.diag(noise)
    ks = kk(grid, xa)
    var = h.signal_variance - np.einsum("ij,ji->i", ks, np.linalg.solve(k, ks.T))
    assert obj.value(z) == pytest.approx(var.mean(), rel=1e-7)


def test_single_point_prior_optimum_is_center():
    cfg = PlannerConfig(n_drones=1, points_per_drone=1, bounds=Bounds(0, 20, 0, 20),
                        candidate_grid_spacing=2.0, max_iters=200)
    model = GpModel.prior(Hyperparams(lengthscale=5.0))
    obj = VarianceObjective(model, cfg.candidate_grid())
    center = obj.value([[10, 10]])
    perimeter = [(t, 0) for t in range(0, 21, 2)] + [(0, t) for t in range(0, 21, 2)]
    assert all(center < obj.value([p]) for p in perimeter)
    z = optimize_inducing_points(model, cfg, init=[[3.0, 15.0]])
    np.testing.assert_allclose(z[0], [10, 10], atol=0.3)


def test_saturation_when_every_grid_point_is_measured():
    cfg = PlannerConfig(n_drones=1, points_per_drone=25, bounds=Bounds(0, 10, 0, 10),
                        candidate_grid_spacing=2.5, max_iters=5)
    model = GpModel.prior()
    info = optimize_inducing_points(model, cfg, init=cfg.candidate_grid(), return_info=True)
    assert info.objective < 1e-4 * model.hyperparams.signal_variance


def test_points_go_where_data_is_missing():
    model = left_half_model()
    cfg = PlannerConfig()
    info = optimize_inducing_points(model, cfg, return_info=True)
    assert np.all(info.points[:, 0] > 25)
    assert info.objective <= info.initial_objective
    assert np.all(np.diff(info.history) <= 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_objective_never_increases(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 40))
    model = fit(rng.uniform(0, 50, (n, 2)), rng.normal(size=(n, 2)))
    cfg = PlannerConfig(candidate_grid_spacing=5.0, max_iters=20)
    init = rng.uniform(0, 50, (9, 2))
    info = optimize_inducing_points(model, cfg, init=init, return_info=True)
    obj = VarianceObjective(model, cfg.candidate_grid())
    assert obj.value(info.points) <= obj.value(init) + 1e-12
    assert np.all(cfg.bounds.contains(info.points))


def test_initial_points_inside_and_distinct():
    cfg = PlannerConfig()
    z = initial_points(left_half_model(), cfg)
    assert z.shape == (9, 2)
    assert len(np.unique(z, axis=0)) == 9
    assert np.all(cfg.bounds.contains(z))


def test_partition_single_route():
    pts = np.array([[0, 0], [5, 0], [1, 0], [3, 0]], dtype=float)
    routes = partition_routes(pts, 1, 4)
    assert len(routes) == 1
    assert sorted(map(tuple, routes[0].waypoints)) == sorted(map(tuple, pts))
    # centroid (2.25, 0) is nearest (3, 0); chain: 3 -> 5 (2) ties 1 (2), lowest index wins
    np.testing.assert_array_equal(routes[0].waypoints, [[3, 0], [5, 0], [1, 0], [0, 0]])


def test_partition_separated_clusters():
    rng = np.random.default_rng(2)
    a = rng.normal([5, 5], 0.5, (3, 2))
    b = rng.normal([45, 40], 0.5, (3, 2))
    routes = partition_routes(np.vstack([a, b]), 2, 3)
    groups = {frozenset(map(tuple, r.waypoints)) for r in routes}
    assert groups == {frozenset(map(tuple, a)), frozenset(map(tuple, b))}


def test_partition_singletons_and_sizes():
    rng = np.random.default_rng(3)
    routes = partition_routes(rng.uniform(0, 50, (4, 2)), 4, 1)
    assert [len(r) for r in routes] == [1, 1, 1, 1]
    routes = partition_routes(rng.uniform(0, 50, (12, 2)), 3, 4)
    assert [len(r) for r in routes] == [4, 4, 4]
    with pytest.raises(ValueError):
        partition_routes(rng.uniform(0, 50, (5, 2)), 2, 3)


def test_assignment_examples():
    assert list(assign_routes([Route([[4, 4]])], [[0, 0]])) == [0]
    routes = [Route([[9, 0], [9, 9]]), Route([[1, 0], [1, 9]])]
    np.testing.assert_array_equal(assign_routes(routes, [[0, 0], [10, 0]]), [1, 0])
    np.testing.assert_allclose(assignment_cost(routes, [[0, 0], [10, 0]]), [[9, 1], [1, 9]])
    with pytest.raises(ValueError):
        assign_routes(routes, [[0, 0]])


def test_assignment_ties_are_lexicographic():
    np.testing.assert_array_equal(solve_assignment(np.ones((4, 4))), [0, 1, 2, 3])
    c = np.array([[1.0, 1.0, 5.0], [1.0, 1.0, 5.0], [5.0, 5.0, 0.0]])
    np.testing.assert_array_equal(solve_assignment(c), [0, 1, 2])


def test_assignment_matches_enumeration_5x5():
    rng = np.random.default_rng(4)
    for _ in range(30):
        c = rng.uniform(0, 10, (5, 5))
        np.testing.assert_array_equal(solve_assignment(c), brute_assignment(c))
        np.testing.assert_array_equal(brute_force_assignment(c), brute_assignment(c))


def test_boustrophedon_50_by_50():
    r = boustrophedon_path(Bounds(0, 50, 0, 50), 10.0)
    assert len(r) == 12
    np.testing.assert_array_equal(r.waypoints[:4], [[0, 0], [50, 0], [50, 10], [0, 10]])
    np.testing.assert_array_equal(r.waypoints[-2:], [[50, 50], [0, 50]])


def test_boustrophedon_single_lane():
    r = boustrophedon_path(Bounds(0, 50, 0, 8), 10.0)
    np.testing.assert_array_equal(r.waypoints, [[0, 4], [50, 4]])


def test_boustrophedon_start_corner():
    r = boustrophedon_path(Bounds(0, 50, 0, 50), 10.0, "upper_right")
    np.testing.assert_array_equal(r.waypoints[:2], [[50, 50], [0, 50]])


@pytest.mark.parametrize("height, spacing", [(50, 10), (47, 10), (30, 7), (5, 10), (50, 3)])
def test_boustrophedon_coverage(height, spacing):
    b = Bounds(0, 40, 0, height)
    r = boustrophedon_path(b, spacing)
    lane_ys = np.unique(r.waypoints[:, 1])
    ys = np.linspace(0, height, 400)
    gap = np.min(np.abs(ys[:, None] - lane_ys[None]), axis=1).max()
    assert gap <= spacing / 2 + 1e-9
    assert r.inside(b)


def test_boustrophedon_bands():
    routes = boustrophedon_routes(Bounds(0, 50, 0, 60), 3, 10.0)
    assert len(routes) == 3
    for i, r in enumerate(routes):
        assert r.waypoints[:, 1].min() == 20 * i and r.waypoints[:, 1].max() == 20 * (i + 1)


def test_replan_trigger():
    a = RouteFollower(Route([[0, 0], [10, 0]]), 0.5)
    b = RouteFollower(Route([[5, 5]]), 0.5)
    assert not replan_trigger([a, b])
    a.update((0, 0.1))
    assert a.index == 1 and not replan_trigger([a, b])
    a.update((10, 0))
    b.update((5.2, 5.2))
    assert replan_trigger([a, b])
    fresh = [RouteFollower(Route([[1, 1]])), RouteFollower(Route([[2, 2]]))]
    assert not replan_trigger(fresh)


def test_plan_ipp_routes_shapes():
    cfg = PlannerConfig(max_iters=30)
    routes, info = plan_ipp_routes(left_half_model(), cfg, [[0, 0], [25, 0], [50, 0]])
    assert len(routes) == 3 and all(len(r) == 3 for r in routes)
    assert all(r.inside(cfg.bounds) for r in routes)
    got = np.sort(np.vstack([r.waypoints for r in routes]), axis=0)
    np.testing.assert_allclose(got, np.sort(info.points, axis=0))


def test_planner_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(n_drones=0)
    with pytest.raises(ValueError):
        PlannerConfig(lane_spacing=0.0)
    assert PlannerConfig().n_points == 9
    assert math.isclose(len(PlannerConfig().candidate_grid()), 21 * 21)
