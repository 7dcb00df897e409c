import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cecsubopt.tree import (TreeTooLarge, build_tree, disturbance_index, geometric_count, parent_index,
                            rollout_tree)


def test_benchmark_tree_sizes(bench_tree):
    assert bench_tree.node_count_states == 2047
    assert bench_tree.node_count_controls == 1023
    assert bench_tree.stage_size(10) == 1024
    assert bench_tree.stage_prob[3] == 0.125


@given(st.integers(2, 5), st.integers(1, 200))
def test_parent_child_roundtrip(m, i):
    tree = build_tree(8, np.arange(m, dtype=float).reshape(-1, 1))
    k = 0
    while m ** k < i:
        k += 1
    if k >= tree.N:
        return
    kids = tree.children(k, i)
    assert len(kids) == m
    assert all(parent_index(c, m) == i for c in kids)
    assert [disturbance_index(c, m) for c in kids] == list(range(1, m + 1))


def test_index_helpers_reject_bad_input():
    with pytest.raises(IndexError):
        parent_index(0, 2)
    with pytest.raises(IndexError):
        disturbance_index(3, 0)


def test_children_out_of_range(bench_tree):
    with pytest.raises(IndexError):
        bench_tree.children(10, 1)
    with pytest.raises(IndexError):
        bench_tree.children(2, 5)


def test_geometric_count():
    assert geometric_count(2, 10) == 2047
    assert geometric_count(3, 2) == 13


def test_budget_guard():
    with pytest.raises(TreeTooLarge):
        build_tree(25, [[-1.0], [1.0]])
    with pytest.raises(TreeTooLarge):
        build_tree(10, [[-1.0], [1.0]], node_budget=2000)


def test_only_uniform_probabilities():
    with pytest.raises(ValueError):
        build_tree(3, [[-1.0], [1.0]], p=[0.25, 0.75])


def test_zero_horizon_tree():
    tree = build_tree(0, [[-1.0], [1.0]])
    assert tree.node_count_states == 1
    assert tree.node_count_controls == 0


def test_split_stages(bench_tree):
    blocks = bench_tree.split_stages(np.arange(1023))
    assert [len(b) for b in blocks] == [2 ** k for k in range(10)]
    with pytest.raises(ValueError):
        bench_tree.split_stages(np.arange(5))


def test_rollout_matches_path_enumeration(bench):
    tree = build_tree(4, bench.noise_support)
    u = np.linspace(-1, 1, tree.node_count_controls)
    sigma = 0.3
    X = rollout_tree(tree, bench, [0.4], u, sigma)
    # walk every disturbance sequence and compare with the leaf it should reach
    for path in itertools.product(range(2), repeat=4):
        x, node = np.array([0.4]), 1
        for k, b in enumerate(path):
            uk = u[tree.stage_offsets[k] + node - 1]
            x = bench.dynamics(x, np.array([uk]), sigma * tree.w_values[b])
            node = (node - 1) * 2 + b + 1
        assert X[tree.stage_offsets[4] + node - 1, 0] == pytest.approx(x[0], abs=1e-14)


def test_rollout_at_zero_noise_repeats_states(bench):
    tree = build_tree(3, bench.noise_support)
    X = rollout_tree(tree, bench, [1.0], np.zeros(tree.node_count_controls), 0.0)
    for k in range(4):
        stage = X[tree.stage_slice(k)]
        assert np.all(stage == stage[0])
