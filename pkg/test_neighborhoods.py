"""
Tests for neighborhood systems: construction, closure, kappa statistics,
neighbor pairs and the JSON / edge-list formats.
"""

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import CapabilityError, StructuralError
from fields import independence_system
from neighborhoods import (
    Level,
    closure_extend,
    from_adjacency,
    from_json,
    from_sets,
    kappa,
    kappa_stats,
    lattice_m_dependent,
    load_system,
    nc_sets,
    neighbor_pairs_b,
    parse_edge_list,
    save_system,
    validate,
)


def _cycle_system(n: int):
    return closure_extend(from_adjacency(nx.cycle_graph(n)))


def test_lattice_sets_are_clipped_balls():
    system = lattice_m_dependent((5,), 1)
    assert system.level is Level.LD4STAR
    assert system.label_set("A", (2,)) == {(1,), (2,), (3,)}
    assert system.label_set("A", (0,)) == {(0,), (1,)}
    assert system.label_set("B", (0,)) == {(0,), (1,), (2,)}
    assert system.label_set("Dstar", (2,)) == set(system.indices)
    assert validate(system) == []


def test_lattice_two_dimensional_ball_size():
    system = lattice_m_dependent((4, 4), 1)
    assert system.n == 16
    assert len(system.label_set("A", (1, 1))) == 9
    assert len(system.label_set("A", (0, 0))) == 4


def test_lattice_rejects_bad_extents():
    with pytest.raises(StructuralError):
        lattice_m_dependent((0, 3), 1)
    with pytest.raises(StructuralError):
        lattice_m_dependent((3,), -1)


def test_closure_on_path_graph():
    system = closure_extend(from_adjacency(nx.path_graph(5)))
    assert system.level is Level.LD4STAR
    assert system.label_set("A", 0) == {0, 1}
    assert system.label_set("B", 0) == {0, 1, 2}
    assert system.label_set("C", 0) == {0, 1, 2, 3}
    assert system.label_set("Bstar", 2) == {0, 1, 2, 3, 4}
    assert validate(system) == []


def test_closure_requires_self_membership():
    bad = from_sets([0, 1], {0: [1], 1: [1]})
    with pytest.raises(StructuralError):
        closure_extend(bad)


def test_from_sets_infers_level_and_rejects_unknown_labels():
    system = from_sets(["a", "b"], {"a": ["a"], "b": ["b"]}, {"a": ["a"], "b": ["b"]})
    assert system.level is Level.LD2
    with pytest.raises(StructuralError):
        from_sets(["a"], {"a": ["a", "z"]})
    with pytest.raises(StructuralError):
        from_sets(["a", "b"], {"a": ["a"]})


def test_declared_level_above_given_sets_is_rejected():
    with pytest.raises(StructuralError):
        from_sets([0], {0: [0]}, level=Level.LD3)


def test_validate_reports_nesting_and_self_membership():
    system = from_sets(
        [0, 1],
        {0: [0, 1], 1: [0]},
        {0: [0], 1: [0, 1]},
    )
    kinds = sorted(v.kind for v in validate(system))
    assert kinds == ["nesting", "self_membership"]


def test_missing_family_is_a_capability_error():
    system = from_adjacency(nx.path_graph(3))
    assert not system.has("B")
    with pytest.raises(CapabilityError):
        system.sets("C")
    with pytest.raises(CapabilityError):
        kappa(system, "kappa_nb")


def test_kappa_statistics_on_cycle():
    stats = kappa_stats(_cycle_system(20))
    # B radius 2, C radius 3, D* radius 7
    assert stats.kappa_nb == 9
    assert stats.kappa_nc == 11
    assert stats.kappa1 == 7
    assert stats.kappa_dstar == 15
    assert stats.kappa2 == 15
    assert kappa(_cycle_system(20), "kappa_nc") == 11


def test_kappa_statistics_on_independent_system():
    stats = kappa_stats(independence_system(6))
    assert stats.to_dict() == {'kappa_nb': 1, 'kappa_nc': 1, 'kappa_dstar': 1, 'kappa1': 1, 'kappa2': 1}


def test_kappa_statistics_below_ld3():
    system = from_sets([0, 1], {0: [0], 1: [1]}, {0: [0, 1], 1: [0, 1]})
    stats = kappa_stats(system)
    assert stats.kappa_nb == 2
    assert stats.kappa_nc is None
    with pytest.raises(CapabilityError):
        stats.get("kappa1")


def test_nc_sets_on_cycle():
    system = _cycle_system(20)
    sets = nc_sets(system)
    expected = {(i + k) % 20 for k in range(-5, 6)}
    assert sets[0] == frozenset(expected)


def test_neighbor_pairs_b_matches_brute_force():
    system = _cycle_system(20)
    pairs = neighbor_pairs_b(system)
    b_sets = system.sets("B")
    brute = {(i, j) for i in range(20) for j in range(20) if b_sets[i] & b_sets[j]}
    assert len(pairs) == 180
    assert set(zip(pairs.rows.tolist(), pairs.cols.tolist())) == brute
    assert (0, 0) in pairs.labels()


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=3, max_value=14), st.integers(min_value=0, max_value=2**16))
def test_neighbor_pairs_random_graphs(n, seed):
    graph = nx.gnp_random_graph(n, 0.25, seed=seed)
    system = closure_extend(from_adjacency(graph))
    b_sets = system.sets("B")
    pairs = neighbor_pairs_b(system)
    brute = {(i, j) for i in range(n) for j in range(n) if b_sets[i] & b_sets[j]}
    assert set(zip(pairs.rows.tolist(), pairs.cols.tolist())) == brute
    assert validate(system) == []


def test_membership_matrix_orientation():
    system = from_adjacency(nx.path_graph(3))
    a = system.membership("A").toarray()
    # column i lists the members of A_i
    assert np.array_equal(a[:, 0], [1, 1, 0])
    assert np.array_equal(a[:, 1], [1, 1, 1])


def test_json_round_trip_keeps_tuple_labels(tmp_path):
    system = lattice_m_dependent((3, 2), 1)
    again = from_json(system.to_json())
    assert again == system
    assert again.lattice == ((3, 2), 1)
    path = tmp_path / "system.json"
    save_system(system, path)
    assert load_system(path) == system


def test_parse_edge_list_with_comments_and_isolated_vertices():
    graph = parse_edge_list("# header\n1 2\n2 3  # trailing\n7\n\n")
    assert set(graph.nodes) == {1, 2, 3, 7}
    assert set(map(frozenset, graph.edges)) == {frozenset({1, 2}), frozenset({2, 3})}
    with pytest.raises(StructuralError):
        parse_edge_list("1 2 3\n")


def test_from_adjacency_accepts_mappings_and_checks_vertices():
    system = from_adjacency({"a": ["b"], "b": [], "c": []})
    assert system.label_set("A", "b") == {"a", "b"}
    assert system.label_set("A", "c") == {"c"}
    with pytest.raises(StructuralError):
        from_adjacency([("a", "z")], vertices=["a", "b"])
