import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridpredict.errors import EmptyClass, IsolatedNode, UnreachableBus, ValidationError
from gridpredict.grid import (
    PowerGraph,
    classify_load_buses,
    default_network,
    graph_operators,
    hops_to_nearest_generator,
    normalized_adjacency,
    normalized_laplacian,
    read_edge_list,
    write_edge_list,
)
from gridpredict.numerics import eig_sym


def chain(kinds):
    buses = [(i + 1, k) for i, k in enumerate(kinds)]
    return PowerGraph.from_lists(buses, [(i, i + 1) for i in range(1, len(kinds))])


@st.composite
def connected_graphs(draw, max_n=12):
    """Random spanning tree plus extra edges, at least one generator."""
    n = draw(st.integers(1, max_n))
    kinds = draw(st.lists(st.sampled_from("GL"), min_size=n, max_size=n))
    kinds[draw(st.integers(0, n - 1))] = "G"
    edges = set()
    for v in range(1, n):
        u = draw(st.integers(0, v - 1))
        edges.add((u + 1, v + 1))
    pairs = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1)]
    if pairs:
        edges |= set(draw(st.lists(st.sampled_from(pairs), max_size=n)))
    return PowerGraph.from_lists([(i + 1, k) for i, k in enumerate(kinds)], edges)


def test_adjacency_consistent():
    g = default_network()
    A = g.adjacency
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 0)
    assert A.sum() == 2 * len(g.edges)
    with pytest.raises(ValueError):
        A[0, 0] = 1.0


def test_validation():
    with pytest.raises(ValidationError):
        PowerGraph.from_lists([(1, "L"), (2, "L")], [(1, 2)])  # no generator
    with pytest.raises(ValidationError):
        PowerGraph.from_lists([(1, "G")], [(1, 1)])
    with pytest.raises(ValidationError):
        PowerGraph.from_lists([(1, "G"), (2, "X")], [(1, 2)])
    with pytest.warns(UserWarning):
        PowerGraph.from_lists([(1, "G"), (2, "L"), (3, "L")], [(1, 2)])


def test_laplacian_two_nodes():
    g = chain("GL")
    np.testing.assert_allclose(normalized_laplacian(g), [[1, -1], [-1, 1]], atol=1e-15)
    np.testing.assert_allclose(normalized_adjacency(g), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_laplacian_k3_spectrum():
    g = PowerGraph.from_lists([(1, "G"), (2, "L"), (3, "L")], [(1, 2), (2, 3), (1, 3)])
    w, _ = eig_sym(normalized_laplacian(g))
    np.testing.assert_allclose(w, [0.0, 1.5, 1.5], atol=1e-12)


def test_isolated_node():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = PowerGraph.from_lists([(1, "G"), (2, "L"), (3, "L")], [(1, 2)])
    with pytest.raises(IsolatedNode):
        normalized_laplacian(g)


def test_single_node_adjacency():
    g = PowerGraph.from_lists([(1, "G")], [])
    np.testing.assert_array_equal(normalized_adjacency(g), [[1.0]])


@given(connected_graphs())
def test_operator_spectra(g):
    Ah = normalized_adjacency(g)
    assert np.max(np.abs(Ah - Ah.T)) <= 1e-12
    w, _ = eig_sym(Ah)
    assert w[0] >= -1 - 1e-10 and w[-1] <= 1 + 1e-10
    if g.n > 1:
        ops = graph_operators(g)
        L = ops.normalized_laplacian
        assert np.max(np.abs(L - L.T)) <= 1e-12
        wl, _ = eig_sym(L)
        assert wl[0] >= -1e-10 and wl[-1] <= 2 + 1e-10
        assert ops.lambda_max == pytest.approx(wl[-1])


def _floyd_hops(g):
    n = g.n
    D = np.where(g.adjacency > 0, 1.0, np.inf)
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    gens = [g.index(b) for b in g.generators]
    return {b: int(D[g.index(b), gens].min()) for b in g.bus_ids}


@given(connected_graphs())
def test_hops_match_all_pairs_oracle(g):
    assert hops_to_nearest_generator(g) == _floyd_hops(g)


@given(connected_graphs(), st.sampled_from([1, 2, 3, 4, 5]))
def test_classes_are_loads(g, case):
    try:
        out = classify_load_buses(g, case)
    except EmptyClass:
        return
    assert all(g.kind(b) == "L" for b in out)


@given(connected_graphs())
def test_hop_classes_disjoint(g):
    sets = []
    for c in (1, 2, 3):
        try:
            sets.append(set(classify_load_buses(g, c)))
        except EmptyClass:
            sets.append(set())
    for a, b in itertools.combinations(sets, 2):
        assert not a & b


def test_hops_chain():
    g = chain("GLL")
    assert hops_to_nearest_generator(g) == {1: 0, 2: 1, 3: 2}
    assert classify_load_buses(g, 1) == [2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g2 = PowerGraph.from_lists([(1, "G"), (2, "L"), (3, "L")], [(2, 3)])
    with pytest.raises(UnreachableBus):
        hops_to_nearest_generator(g2)


def test_degree_classes():
    star = PowerGraph.from_lists([(1, "G")] + [(b, "L") for b in range(2, 7)],
                                 [(2, b) for b in (1, 3, 4, 5, 6)])
    assert 2 in classify_load_buses(star, 4)
    assert 3 in classify_load_buses(star, 5)  # leaf, degree 1
    with pytest.raises(EmptyClass):
        classify_load_buses(chain("GL"), 4)
    with pytest.raises(ValidationError):
        classify_load_buses(star, 6)


def test_default_network_classes():
    g = default_network()
    assert g.n == 9 and g.generators == [1, 2, 3]
    expected = {1: [4, 8], 2: [5, 7, 9], 3: [6], 4: [4], 5: [5, 6, 7, 8, 9]}
    for case, buses in expected.items():
        assert classify_load_buses(g, case) == buses


def test_edge_list_roundtrip(tmp_path):
    g = default_network()
    p = tmp_path / "net.txt"
    write_edge_list(g, p)
    g2 = read_edge_list(p)
    assert g2 == g and g2.fingerprint() == g.fingerprint()
    bad = tmp_path / "bad.txt"
    bad.write_text("1 G\n2 L\n1 2 3\n")
    with pytest.raises(ValidationError):
        read_edge_list(bad)


def test_fingerprint_sensitive_to_topology():
    g = default_network()
    g2 = PowerGraph(g.buses, g.edges | {(7, 9)})
    assert g.fingerprint() != g2.fingerprint()
