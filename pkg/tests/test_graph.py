import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import shortest_path

from schwarz_net.errors import InputError
from schwarz_net.graph import (Graph, Partition, all_pairs_distance, bfs_distance, expand_overlap,
                               format_stats_table, greedy_partition, partition_stats)


def _adjacency(g):
    a = np.zeros((g.n_vertices, g.n_vertices))
    for i, j in g.edges():
        a[i, j] = a[j, i] = 1
    return a


def _oracle_distances(g):
    return shortest_path(_adjacency(g), unweighted=True, directed=False)


@st.composite
def graphs(draw, max_n=12):
    n = draw(st.integers(1, max_n))
    pairs = list(itertools.combinations(range(n), 2))
    edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=3 * n)) if pairs else []
    return Graph.from_edges(n, edges)


def test_bfs_path():
    g = Graph.path(4)
    assert bfs_distance(g, [0]).tolist() == [0, 1, 2, 3]


def test_bfs_all_sources_zero():
    g = Graph.cycle(7)
    assert np.all(bfs_distance(g, range(7)) == 0)


def test_bfs_triangle_pendant():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)])
    assert bfs_distance(g, [0, 1]).tolist() == [0, 0, 1, 2]


def test_bfs_cutoff_and_errors():
    g = Graph.path(6)
    d = bfs_distance(g, [0], cutoff=2)
    assert d[:3].tolist() == [0, 1, 2] and np.all(np.isinf(d[3:]))
    with pytest.raises(InputError):
        bfs_distance(g, [])
    with pytest.raises(InputError):
        bfs_distance(g, [6])


def test_graph_validation():
    with pytest.raises(InputError):
        Graph.from_edges(3, [(0, 0)])
    with pytest.raises(InputError):
        Graph.from_edges(3, [(0, 3)])
    g = Graph.from_edges(3, [(0, 1), (1, 0), (1, 2)])
    assert g.n_edges == 2
    assert Graph.from_json(g.to_json()).edges() == g.edges()


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_set_distance_decomposition(g):
    oracle = _oracle_distances(g)
    assert np.array_equal(all_pairs_distance(g), oracle)
    rng = np.random.default_rng(g.n_vertices)
    src = rng.choice(g.n_vertices, size=min(3, g.n_vertices), replace=False)
    assert np.array_equal(bfs_distance(g, src), oracle[src].min(axis=0))


def test_expand_path_example():
    g = Graph.path(6)
    p = Partition.from_blocks(6, [[0, 1, 2], [3, 4, 5]])
    ob = expand_overlap(g, p, 1)
    assert ob.blocks[0].tolist() == [0, 1, 2, 3]
    assert ob.blocks[1].tolist() == [2, 3, 4, 5]
    ob0 = expand_overlap(g, p, 0)
    assert all(np.array_equal(b, i) for b, i in zip(ob0.blocks, ob0.interior))
    full = expand_overlap(g, p, g.diameter())
    assert all(len(b) == 6 for b in full.blocks)


@settings(max_examples=40, deadline=None)
@given(graphs(), st.integers(1, 4), st.integers(0, 3))
def test_expand_matches_definition(g, k, omega):
    k = min(k, g.n_vertices)
    p = greedy_partition(g, k, seed=1)
    ob = expand_overlap(g, p, omega)
    nxt = expand_overlap(g, p, omega + 1)
    d = _oracle_distances(g)
    for kk, vk in enumerate(p.blocks()):
        want = np.flatnonzero(d[vk].min(axis=0) <= omega)
        assert ob.blocks[kk].tolist() == want.tolist()
        assert set(vk) <= set(ob.blocks[kk].tolist())
        assert set(ob.blocks[kk].tolist()) <= set(nxt.blocks[kk].tolist())
    owners = np.concatenate(ob.interior)
    assert sorted(owners.tolist()) == list(range(g.n_vertices))


def test_overlap_exists_when_connected():
    g = Graph.cycle(12)
    p = greedy_partition(g, 3)
    ob = expand_overlap(g, p, 1)
    for k in range(3):
        assert any(np.intersect1d(ob.blocks[k], ob.blocks[j]).size for j in range(3) if j != k)


def test_greedy_partition_examples():
    assert sorted(greedy_partition(Graph.path(6), 2).sizes().tolist()) == [3, 3]
    p = greedy_partition(Graph.path(6), 2)
    for b in p.blocks():
        assert np.all(np.diff(b) == 1)       # contiguous
    assert np.all(greedy_partition(Graph.cycle(5), 1).assignment == 0)
    assert sorted(greedy_partition(Graph.cycle(5), 5).sizes().tolist()) == [1] * 5
    with pytest.raises(InputError):
        greedy_partition(Graph.path(3), 4)


def test_greedy_partition_deterministic_and_balanced():
    from schwarz_net.problems import generate_network
    g, _ = generate_network("lattice2d", rows=12, cols=12)
    a = greedy_partition(g, 5, seed=3)
    b = greedy_partition(g, 5, seed=3)
    assert np.array_equal(a.assignment, b.assignment)
    s = a.sizes()
    assert s.max() - s.min() <= 2


def test_skewed_partition_has_large_block():
    from schwarz_net.problems import generate_network
    g, _ = generate_network("lattice2d", rows=12, cols=12)
    s = greedy_partition(g, 4, balance_mode="skewed").sizes()
    others = np.delete(s, s.argmax())
    assert s.max() >= 3 * others.max()


def test_disconnected_graph_partition():
    g = Graph.from_edges(6, [(0, 1), (1, 2), (3, 4), (4, 5)])
    p = greedy_partition(g, 2)
    blocks = [set(b.tolist()) for b in p.blocks()]
    assert {0, 1, 2} in blocks and {3, 4, 5} in blocks


def test_partition_validation_and_json():
    with pytest.raises(InputError):
        Partition(2, np.array([0, 0, 0]))
    with pytest.raises(InputError):
        Partition.from_blocks(3, [[0, 1], [1, 2]])
    p = Partition.from_blocks(3, [[0, 2], [1]])
    assert np.array_equal(Partition.from_json(p.to_json()).assignment, p.assignment)


def test_partition_stats_path_and_star():
    g = Graph.path(6)
    p = Partition.from_blocks(6, [[0, 1, 2], [3, 4, 5]])
    st_ = partition_stats(g, p, 1)
    assert st_["ring"][0].tolist() == [1, 1]
    assert st_["size"][0].sum() == 6
    star = Graph.from_edges(6, [(0, i) for i in range(1, 6)])
    ps = Partition.from_blocks(6, [[0], [1, 2, 3, 4, 5]])
    size = partition_stats(star, ps, 1)["size"]
    assert size[1, 0] == 6
    table = format_stats_table(partition_stats(g, p, 2))
    assert table[0][-1] == "Total" and table[1][-1] == "6"


@settings(max_examples=30, deadline=None)
@given(graphs(), st.integers(1, 3))
def test_partition_stats_monotone(g, k):
    p = greedy_partition(g, min(k, g.n_vertices))
    st_ = partition_stats(g, p, 3)
    assert np.all(np.diff(st_["size"], axis=0) >= 0)
    assert np.all(st_["ring"] >= 0)
    assert st_["size"][0].sum() == g.n_vertices
