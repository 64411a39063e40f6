"""
Tests for the random field families, seeding and exact enumeration.
"""

import itertools
import math

import networkx as nx
import numpy as np
import pytest

from config import config
from errors import DegeneracyError, StructuralError, UsageError
from fields import (
    covariance_matrix,
    derive_seed,
    edge_sum_field,
    enumerate_field,
    erickson_field,
    erickson_pattern,
    exact_enumerate,
    iid_field,
    local_maxima_field,
    local_maxima_moments,
    map_replicates,
    model_from_spec,
    moving_sum_field,
    pilot_standardize,
    sample,
    sample_w,
    structural_violations,
)
from neighborhoods import Level


def _second_moment(atoms):
    return sum(p * v * v for v, p in atoms)


def test_seed_derivation_is_deterministic():
    a = derive_seed(5, 21, 3).generate_state(4)
    b = derive_seed(5, 21, 3).generate_state(4)
    c = derive_seed(5, 21, 4).generate_state(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_is_reproducible():
    model = moving_sum_field([12], 2, "uniform")
    first = sample(model, 99)
    assert np.array_equal(first.values, sample(model, 99).values)
    assert not np.array_equal(first.values, sample(model, 100).values)
    assert first.w == pytest.approx(first.values.sum())


def test_results_do_not_depend_on_thread_count(monkeypatch):
    model = moving_sum_field([15], 1, "shifted-exponential")
    monkeypatch.setattr(config, "chunk_size", 100)
    single = sample_w(model, 4, 0, 1050, threads=1)
    pooled = sample_w(model, 4, 0, 1050, threads=4)
    assert np.array_equal(single, pooled)
    blocks = map_replicates(model, 4, 0, 1050, lambda v: v.shape[0], threads=3)
    assert blocks == [100] * 10 + [50]


def test_iid_exact_law():
    atoms = exact_enumerate(iid_field(3))
    root3 = math.sqrt(3.0)
    expected = [(-root3, 0.125), (-1 / root3, 0.375), (1 / root3, 0.375), (root3, 0.125)]
    assert len(atoms) == 4
    for (v, p), (ev, ep) in zip(atoms, expected):
        assert v == pytest.approx(ev)
        assert p == pytest.approx(ep)


def test_iid_fast_path_has_unit_variance():
    w = sample_w(iid_field(50), 1, 0, 40000)
    assert np.mean(w) == pytest.approx(0.0, abs=0.03)
    assert np.var(w) == pytest.approx(1.0, abs=0.04)


def test_large_models_are_not_enumerable():
    assert iid_field(3).can_enumerate
    assert not iid_field(40).can_enumerate
    assert not moving_sum_field([30], 1).can_enumerate


def test_moving_sum_is_standardized_and_local():
    model = moving_sum_field([6], 1)
    assert model.system.level is Level.LD4STAR
    assert model.outcome_count == 2 ** 6
    assert _second_moment(exact_enumerate(model)) == pytest.approx(1.0)
    assert structural_violations(model) == []


def test_covariance_oracle_matches_enumeration():
    model = moving_sum_field([6], 2)
    law = enumerate_field(model)
    empirical = (law.values * law.probs[:, None]).T @ law.values
    assert np.allclose(empirical, covariance_matrix(model).toarray())


def test_edge_sum_field_is_a_dependency_graph_field():
    graph = nx.path_graph(5)
    model = edge_sum_field(graph)
    assert model.metadata['max_degree'] == 2
    assert model.metadata['vertices'] == 5
    assert structural_violations(model) == []
    assert _second_moment(exact_enumerate(model)) == pytest.approx(1.0)


def test_local_maxima_moments_on_cycle_nine():
    d, ew, sigma2 = local_maxima_moments(nx.cycle_graph(9))
    assert d == 2
    assert ew == pytest.approx(3.0)
    assert sigma2 == pytest.approx(0.4)


def _count_by_rank_orderings(graph):
    """Mean and variance of the strict local-maximum count over all n! orderings."""
    nodes = list(graph.nodes)
    neighbours = [[nodes.index(j) for j in graph.neighbors(i)] for i in nodes]
    counts = np.array([
        sum(all(ranks[i] > ranks[j] for j in nbrs) for i, nbrs in enumerate(neighbours))
        for ranks in itertools.permutations(range(len(nodes)))
    ], dtype=np.float64)
    return counts.mean(), counts.var()


@pytest.mark.parametrize("graph", [
    nx.cycle_graph(7),
    nx.complete_bipartite_graph(3, 3),
    nx.hypercube_graph(3),
])
def test_local_maxima_moments_match_rank_enumeration(graph):
    mean, var = _count_by_rank_orderings(graph)
    _, ew, sigma2 = local_maxima_moments(graph)
    assert ew == pytest.approx(mean, abs=1e-12)
    assert sigma2 == pytest.approx(var, abs=1e-12)


def test_local_maxima_moments_on_cycle_seven():
    mean, var = _count_by_rank_orderings(nx.cycle_graph(7))
    assert mean == pytest.approx(7 / 3, abs=1e-12)
    assert var == pytest.approx(14 / 45, abs=1e-12)
    assert var == pytest.approx(0.3111, abs=1e-4)


def test_local_maxima_field_exact_law():
    graph = nx.cycle_graph(6)
    model = local_maxima_field(graph)
    law = enumerate_field(model)
    w = law.values.sum(axis=1)
    assert float(law.probs @ w) == pytest.approx(0.0, abs=1e-12)
    assert float(law.probs @ (w * w)) == pytest.approx(1.0)
    counts = w * math.sqrt(model.metadata['sigma2']) + model.metadata['EW']
    assert np.allclose(counts, np.round(counts))
    assert structural_violations(model) == []


def test_local_maxima_covariance_oracle():
    model = local_maxima_field(nx.cycle_graph(6))
    law = enumerate_field(model)
    empirical = (law.values * law.probs[:, None]).T @ law.values
    assert np.allclose(empirical, covariance_matrix(model).toarray())


def test_local_maxima_needs_regular_graph():
    with pytest.raises(StructuralError):
        local_maxima_field(nx.path_graph(5))


def test_local_maxima_complete_graph_is_degenerate():
    # exactly one local maximum on a complete graph
    with pytest.raises(DegeneracyError):
        local_maxima_field(nx.complete_graph(4))


def test_erickson_variance_sequence():
    _, _, b2 = erickson_pattern(6)
    assert b2.tolist() == [1, 2, 1, 2, 3, 2]


def test_erickson_variance_tracks_square_root():
    n = 10 ** 6
    _, _, b2 = erickson_pattern(n)
    assert np.max(np.abs(b2 - np.sqrt(np.arange(1, n + 1)))) <= 2.0
    assert np.all(b2 >= 1)


def test_erickson_field_is_standardized():
    for neighborhoods in ("window", "tight"):
        model = erickson_field(12, neighborhoods)
        assert model.system.indices[0] == 1
        assert _second_moment(exact_enumerate(model)) == pytest.approx(1.0)
        assert structural_violations(model) == []
    with pytest.raises(StructuralError):
        erickson_field(12, "wide")


def test_pilot_standardize_recovers_unit_variance():
    model = pilot_standardize(moving_sum_field([20], 1, "uniform"), samples=20000, seed=2)
    assert not model.standardization.exact
    assert model.standardization.variance_estimate == pytest.approx(1.0, abs=0.05)
    w = sample_w(model, 9, 0, 20000)
    assert np.var(w) == pytest.approx(1.0, abs=0.05)


def test_model_from_spec_kinds_and_errors():
    assert model_from_spec({"kind": "iid", "n": 4}).n == 4
    assert model_from_spec({"kind": "moving_sum", "shape": [3, 3], "m": 1}).n == 9
    assert model_from_spec({"kind": "local_maxima", "graph": {"cycle": 7}}).n == 7
    assert model_from_spec({"kind": "edge_sum", "graph": {"edges": [[0, 1], [1, 2]]}}).n == 3
    with pytest.raises(UsageError):
        model_from_spec({"kind": "torus"})
    with pytest.raises(UsageError) as err:
        model_from_spec({"kind": "iid"})
    assert err.value.field == "model.n"
