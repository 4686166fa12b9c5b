import numpy as np
import pytest

from schwarz_net.errors import InputError, NotPositiveDefiniteError
from schwarz_net.graph import Graph, expand_overlap, greedy_partition
from schwarz_net.matrix import bandwidth
from schwarz_net.problems import (EstimationProblem, GraphQPSpec, build_estimation_system,
                                  estimation_instance, generate_network, reduce_graph_qp,
                                  simulate_measurements)
from schwarz_net.spectral import rate_bound


def zeros_spec(g, **kw):
    n, m = g.n_vertices, g.n_edges
    base = dict(q=np.zeros(n), r=np.zeros(n), f_lin=np.zeros(n), s=np.zeros(m),
                a_diag=np.zeros(n), a_off=np.zeros(m), b=np.zeros(m))
    base.update(kw)
    return GraphQPSpec(g, **base)


def test_identity_qp():
    g = Graph.path(4)
    h, f = reduce_graph_qp(zeros_spec(g, q=np.ones(4), f_lin=np.arange(4.0)))
    assert np.array_equal(h.toarray(), np.eye(4))
    assert f.tolist() == [0, 1, 2, 3]


def test_singular_edge_term_rejected():
    g = Graph.path(2)
    with pytest.raises(NotPositiveDefiniteError) as exc:
        reduce_graph_qp(zeros_spec(g, s=np.ones(1), b=np.ones(1)))
    assert exc.value.smallest_eigenvalue == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputError):
        zeros_spec(g, q=-np.ones(2))
    with pytest.raises(InputError):
        zeros_spec(g, s=np.ones(3))


def test_path3_dense_assembly():
    rng = np.random.default_rng(0)
    g = Graph.path(3)
    q, r, ad = rng.random(3) + 0.5, rng.random(3), rng.normal(size=3)
    s, ao, b = rng.random(2), rng.normal(size=2), rng.normal(size=2)
    h, _ = reduce_graph_qp(GraphQPSpec(g, q, r, np.zeros(3), s, ad, ao, b))
    A = np.diag(ad)
    B = np.zeros((2, 3))
    for e, (i, j) in enumerate(g.edges()):
        A[i, j] = A[j, i] = -ao[e]
        B[e, i], B[e, j] = b[e], -b[e]
    oracle = np.diag(q) + A.T @ np.diag(r) @ A + B.T @ np.diag(s) @ B
    assert np.allclose(h.toarray(), oracle, atol=1e-14)


def test_network_sizes():
    g, y = generate_network("lattice2d", rows=2, cols=2)
    assert (g.n_vertices, g.n_edges) == (4, 4)
    g, y = generate_network("lattice2d", rows=30, cols=30)
    assert g.n_edges == 1740 and len(y) == 1740
    assert np.all((y >= 1) & (y <= 10))
    g, _ = generate_network("random_tree_plus_chords", n=100, chords=20, seed=4)
    assert g.n_edges == 119 and g.is_connected()
    with pytest.raises(InputError):
        generate_network("random_tree_plus_chords", n=4, chords=10)
    with pytest.raises(InputError):
        generate_network("hexagonal", rows=2, cols=2)


def test_noiseless_zero_truth_gives_zero_solution():
    g, y = generate_network("lattice2d", rows=4, cols=4)
    p = simulate_measurements(g, y, 0.5, truth_mode="zero", noise=False)
    h, f = build_estimation_system(p)
    assert np.allclose(f, 0)
    assert np.allclose(np.linalg.solve(h.toarray(), f), 0)


def test_triangle_assembly():
    g = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    y = np.array([1.0, 2.0, 4.0])
    meas = np.array([True, False, True])
    c = 0.5
    p = EstimationProblem(g, y, meas, np.array([0.3, -0.1, 0.2]), np.array([0.1, 0.0, -0.2]), c)
    h, f = build_estimation_system(p)
    Y = np.zeros((3, 3))
    for e, (i, j) in enumerate(g.edges()):
        Y[e, i], Y[e, j] = y[e], -y[e]
    sp_ = np.where(meas, y, np.sqrt(10) * y)
    WP = np.diag(1 / sp_ ** 2)
    oracle = c ** 2 * np.eye(3) + Y.T @ WP @ Y
    assert np.allclose(h.toarray(), oracle)
    assert np.allclose(f, Y.T @ WP @ p.P_m + c ** 2 * p.delta_m)


def test_single_edge_unit_weights():
    p = EstimationProblem(Graph.path(2), [1.0], [True], [0.0], [0.0, 0.0], 1.0)
    h, _ = build_estimation_system(p)
    assert np.array_equal(h.toarray(), [[2.0, -1.0], [-1.0, 2.0]])


def test_larger_prior_weight_tightens_bound():
    alphas = []
    for c in (0.01, 0.1, 1.0):
        p = estimation_instance(8, 8, c=c)
        h, _ = build_estimation_system(p)
        ob = expand_overlap(p.g, greedy_partition(p.g, 4), 1)
        alphas.append(rate_bound(h, p.g, ob).alpha)
    assert alphas[0] > alphas[1] > alphas[2]


def test_map_estimate_is_optimal():
    p = estimation_instance(5, 6, c=0.3, seed=2)
    h, f = build_estimation_system(p)
    a = h.toarray()
    d = np.linalg.solve(a, f)
    # the normal equations are the gradient of the objective
    eps = 1e-6
    grad = np.array([(p.objective(d + eps * e) - p.objective(d - eps * e)) / (2 * eps)
                     for e in np.eye(len(d))])
    assert np.abs(grad).max() < 1e-5
    # dense oracle: weighted least squares on the stacked prior and flow rows
    Y = p.flow_matrix().toarray()
    A = np.vstack([np.eye(len(d)) / p.sigma_delta[:, None], Y / p.sigma_P[:, None]])
    b = np.concatenate([p.delta_m / p.sigma_delta, p.P_m / p.sigma_P])
    assert np.abs(np.linalg.lstsq(A, b, rcond=None)[0] - d).max() <= 1e-8
    assert p.objective(d) <= p.objective(p.delta_m)
    assert p.objective(d) <= p.objective(p.truth)
    assert bandwidth(h, p.g) <= 1


def test_problem_validation():
    g = Graph.path(2)
    with pytest.raises(InputError):
        EstimationProblem(g, [1.0], [True], [0.0], [0.0, 0.0], 0.0)
    with pytest.raises(InputError):
        EstimationProblem(g, [-1.0], [True], [0.0], [0.0, 0.0], 1.0)
    with pytest.raises(InputError):
        simulate_measurements(g, [1.0], 1.0, measured_fraction=0)
