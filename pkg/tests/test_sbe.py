import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_delta_lstsq, objective_c
from swarmbias.field import Constant, GaussianRadial, eval_bias
from swarmbias.sbe import (AnchoringError, Delta, DeltaGraph, build_graph, connected_component,
                           make_pair_delta, make_step_delta, objective, solve_biases)
from swarmbias.sim import DroneEstimate, DroneState, NoiseConfig, sense

ZERO = NoiseConfig.zero()


def graph(n, edges, deltas, anchor=0, anchor_bias=(0.0, 0.0)):
    return DeltaGraph(np.arange(2.0 * n).reshape(n, 2), np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                      np.asarray(deltas, dtype=float).reshape(-1, 2), anchor, np.asarray(anchor_bias, float))


def observe(field, positions):
    swarm = [DroneState(p) for p in positions]
    rng = np.random.default_rng(0)
    return [sense(field, swarm, i, ZERO, rng, 0) for i in range(len(swarm))]


def test_pair_delta_uniform_bias_cancels():
    o = observe(Constant((2, -1)), [(0, 0), (3, 4)])
    np.testing.assert_allclose(make_pair_delta(o[0], o[1]).delta, [0, 0], atol=1e-12)


def test_pair_delta_two_point_field():
    # bias (1, 0) at the origin, zero at (3, 4)
    field = GaussianRadial((-1, 0), 1.0 / np.exp(-0.5 / 1.0), 1.0)
    np.testing.assert_allclose(eval_bias(field, (0, 0)), [1, 0])
    np.testing.assert_allclose(eval_bias(field, (3, 4)), [0, 0], atol=1e-6)
    o = observe(field, [(0, 0), (3, 4)])
    d = make_pair_delta(o[0], o[1])
    np.testing.assert_allclose(d.delta, [1, 0], atol=1e-6)
    np.testing.assert_allclose(d.p1, [1, 0])


def test_pair_delta_count_for_seven_drones():
    obs = observe(Constant((0, 0)), [(3.0 * i, i ** 1.5) for i in range(7)])
    pairs = [make_pair_delta(a, b) for a in obs for b in obs if a.drone_id != b.drone_id]
    assert len(pairs) == 42


def test_pair_delta_argument_errors():
    o = observe(Constant((0, 0)), [(0, 0), (3, 4)])
    with pytest.raises(ValueError):
        make_pair_delta(o[0], o[0])
    later = sense(Constant((0, 0)), [DroneState((0, 0)), DroneState((3, 4))], 1, ZERO,
                  np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        make_pair_delta(o[0], later)


def step_obs(field, p_prev, p_k):
    rng = np.random.default_rng(0)
    prev = sense(field, [DroneState(p_prev), DroneState((100, 100))], 0, ZERO, rng, 3)
    cur = sense(field, [DroneState(p_k), DroneState((100, 100))], 0, ZERO, rng, 4)
    return cur, prev


def test_step_delta_constant_and_stationary():
    cur, prev = step_obs(Constant((1, 1)), (2, 2), (5, 2))
    d = make_step_delta(cur, prev, DroneEstimate((5, 2)), DroneEstimate((2, 2)))
    np.testing.assert_allclose(d.delta, [0, 0], atol=1e-12)
    field = GaussianRadial((0, 0), 3.0, 5.0)
    cur, prev = step_obs(field, (2, 2), (2, 2))
    d = make_step_delta(cur, prev, DroneEstimate((2, 2)), DroneEstimate((2, 2)))
    np.testing.assert_array_equal(d.delta, [0, 0])


def test_step_delta_linear_field():
    # bias_x grows 0.1 per metre of x; sample the linear field on a grid
    from swarmbias.field import GridInterp
    xs = np.arange(0.0, 21.0)
    gx, gy = np.meshgrid(xs, xs)
    field = GridInterp((0, 0), 1.0, np.stack([0.1 * gx, 0 * gy], axis=-1))
    cur, prev = step_obs(field, (5, 5), (10, 5))
    d = make_step_delta(cur, prev, DroneEstimate((10, 5)), DroneEstimate((5, 5)))
    np.testing.assert_allclose(d.delta, [0.5, 0], atol=1e-12)
    assert d.kind == "step" and d.timestep == 4


def test_step_delta_errors():
    cur, prev = step_obs(Constant((0, 0)), (0, 0), (1, 0))
    with pytest.raises(ValueError):
        make_step_delta(prev, cur, DroneEstimate((0, 0)), DroneEstimate((1, 0)))


def test_delta_rejects_non_finite():
    with pytest.raises(ValueError):
        Delta((0, 0), (1, np.inf), (0, 0))


def test_build_graph_shared_endpoint():
    g = build_graph([Delta((0, 0), (5, 5), (1, 0)), Delta((5, 5), (9, 1), (0, 1))], (0, 0), (0, 0))
    assert g.n_nodes == 3 and len(g.edges) == 2
    np.testing.assert_array_equal(g.edges, [[0, 1], [1, 2]])


def test_build_graph_merges_within_tolerance():
    g = build_graph([Delta((0, 0), (5, 5), (1, 0)), Delta((5.0005, 5), (9, 1), (0, 1))], (0, 0), (0, 0),
                    merge_tol=1e-3)
    assert g.n_nodes == 3
    np.testing.assert_array_equal(g.nodes[1], [5, 5])
    g2 = build_graph([Delta((0, 0), (5, 5), (1, 0)), Delta((5.0005, 5), (9, 1), (0, 1))], (0, 0), (0, 0))
    assert g2.n_nodes == 4


def test_build_graph_keeps_delta_values():
    ds = [Delta((0, 0), (1, 0), (0.25, -0.5)), Delta((1, 0), (2, 0), (1e-3, 7))]
    g = build_graph(ds, (0, 0), (0, 0))
    np.testing.assert_array_equal(g.deltas, [[0.25, -0.5], [1e-3, 7]])


def test_build_graph_anchor_errors():
    with pytest.raises(AnchoringError):
        build_graph([Delta((0, 0), (1, 0), (0, 0))], (0.5, 0), (0, 0))
    with pytest.raises(ValueError):
        build_graph([], (0, 0), (0, 0))
    with pytest.raises(ValueError):
        build_graph([Delta((0, 0), (1, 0), (0, 0))], (0, 0), (0, 0), merge_tol=-1)


def test_connectivity():
    assert connected_component(graph(3, [[0, 1], [1, 2]], [[0, 0]] * 2)).all()
    reach = connected_component(graph(5, [[0, 1], [2, 3], [3, 4]], [[0, 0]] * 3))
    np.testing.assert_array_equal(reach, [True, True, False, False, False])
    np.testing.assert_array_equal(connected_component(graph(3, [], [])), [True, False, False])


def test_single_edge_closed_form():
    est = solve_biases(graph(2, [[0, 1]], [[1, 2]]))
    np.testing.assert_allclose(est.biases[1], [-1, -2], atol=1e-14)


def test_consistent_triangle_exact():
    d = np.array([[1.0, 0.5], [-0.25, 2.0]])
    deltas = [d[0], d[1], -(d[0] + d[1])]
    g = graph(3, [[0, 1], [1, 2], [2, 0]], deltas)
    est = solve_biases(g)
    assert objective(g, est.biases) < 1e-25


def test_inconsistent_triangle_spreads_error():
    # with cycle error eps on one edge the optimum leaves eps/3 on every edge,
    # so C = 3 * (eps/3)^2 = eps^2/3 per component
    eps = np.array([0.3, -0.6])
    deltas = [[1.0, 0.0], [0.0, 1.0], np.array([-1.0, -1.0]) + eps]
    g = graph(3, [[0, 1], [1, 2], [2, 0]], deltas)
    est = solve_biases(g)
    assert objective(g, est.biases) == pytest.approx(np.sum(eps ** 2) / 3, rel=1e-12)
    ref = dense_delta_lstsq(3, g.edges, g.deltas, 0, g.anchor_bias)
    np.testing.assert_allclose(est.biases, ref, atol=1e-10)


def random_graph(rng, n_max=12):
    n = int(rng.integers(2, n_max + 1))
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]  # spanning tree
    edges += [tuple(rng.integers(0, n, 2)) for _ in range(rng.integers(0, 2 * n))]
    edges = [e if rng.random() < 0.5 else e[::-1] for e in edges]
    anchor = int(rng.integers(0, n))
    return graph(n, edges, rng.normal(size=(len(edges), 2)), anchor, rng.normal(size=2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_matches_dense_oracle(seed):
    g = random_graph(np.random.default_rng(seed))
    est = solve_biases(g)
    ref = dense_delta_lstsq(g.n_nodes, g.edges, g.deltas, g.anchor, g.anchor_bias)
    np.testing.assert_allclose(est.biases, ref, atol=1e-8)
    assert objective(g, est.biases) == pytest.approx(objective_c(g.edges, g.deltas, ref), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_anchor_exact_and_gauge_shift(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    est = solve_biases(g)
    assert np.array_equal(est.biases[g.anchor], g.anchor_bias)
    v = rng.normal(size=2) * 10
    shifted = graph(g.n_nodes, g.edges, g.deltas, g.anchor, g.anchor_bias + v)
    np.testing.assert_allclose(solve_biases(shifted).biases, est.biases + v, atol=1e-10)


def test_components_decouple():
    g = random_graph(np.random.default_rng(5))
    full = solve_biases(g).biases
    gx = graph(g.n_nodes, g.edges, np.c_[g.deltas[:, 0], np.zeros(len(g.edges))], g.anchor,
               (g.anchor_bias[0], 0.0))
    np.testing.assert_allclose(solve_biases(gx).biases[:, 0], full[:, 0], atol=1e-12)
    np.testing.assert_allclose(solve_biases(gx).biases[:, 1], 0.0, atol=1e-12)


def test_unreachable_nodes_flagged():
    g = graph(5, [[0, 1], [2, 3], [3, 4]], [[1, 1]] * 3)
    est = solve_biases(g)
    np.testing.assert_array_equal(est.reachable, [True, True, False, False, False])
    assert np.isnan(est.biases[2:]).all()
    pos, bias = est.reachable_items()
    assert len(pos) == 2 and np.isfinite(bias).all()


def test_conjugate_gradient_path_matches_dense():
    g = random_graph(np.random.default_rng(9), n_max=40)
    dense = solve_biases(g)
    cg = solve_biases(g, dense_limit=0)
    np.testing.assert_allclose(cg.biases, dense.biases, atol=1e-8)


def test_zero_noise_recovery_on_chain():
    field = GaussianRadial((4, 3), 2.0, 3.0)
    pts = np.array([[0.5 * k, 0.2 * k ** 1.2] for k in range(25)])
    bias = np.array([eval_bias(field, p) for p in pts])
    deltas = [Delta(pts[k], pts[k - 1], bias[k] - bias[k - 1]) for k in range(1, 25)]
    deltas += [Delta(pts[k], pts[k - 5], bias[k] - bias[k - 5]) for k in range(5, 25)]
    est = solve_biases(build_graph(deltas, pts[0], bias[0]))
    order = [int(np.argmin(np.linalg.norm(est.positions - p, axis=1))) for p in pts]
    np.testing.assert_allclose(est.biases[order], bias, atol=1e-8)
