"""Scenario trees over a finite disturbance set.

Nodes are stored stage by stage in flat arrays.  Public index helpers use
1-based positions within a stage; internally node ``j`` (0-based) of stage
``k + 1`` hangs below node ``j // m`` of stage ``k`` via branch ``j % m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_NODE_BUDGET = 1_000_000


class TreeTooLarge(ValueError):
    pass


def parent_index(i: int, m: int) -> int:
    """1-based parent position of child ``i`` (``ceil(i / m)``)."""
    if m < 1 or i < 1:
        raise IndexError(f"invalid node index {i} for branching {m}")
    return -(-i // m)


def disturbance_index(i: int, m: int) -> int:
    """1-based branch (disturbance) index of node ``i``."""
    if m < 1 or i < 1:
        raise IndexError(f"invalid node index {i} for branching {m}")
    return (i - 1) % m + 1


def geometric_count(m: int, last: int) -> int:
    """Number of nodes in stages ``0..last``."""
    return sum(m ** k for k in range(last + 1))


@dataclass(frozen=True)
class ScenarioTree:
    m: int
    N: int
    w_values: np.ndarray
    stage_offsets: tuple
    node_count_states: int
    node_count_controls: int

    @property
    def p(self) -> float:
        return 1.0 / self.m

    @property
    def stage_prob(self) -> np.ndarray:
        return self.p ** np.arange(self.N + 1)

    def stage_size(self, k: int) -> int:
        return self.m ** k

    def stage_slice(self, k: int) -> slice:
        return slice(self.stage_offsets[k], self.stage_offsets[k] + self.m ** k)

    def children(self, k: int, i: int) -> list[int]:
        """1-based positions in stage ``k + 1`` of the children of node ``i`` in stage ``k``."""
        if not 1 <= i <= self.m ** k or k >= self.N:
            raise IndexError("no such control node")
        return [(i - 1) * self.m + b for b in range(1, self.m + 1)]

    def split_stages(self, flat) -> list:
        """Split a per-state-node (or per-control-node) array into stage blocks."""
        n = len(flat)
        last = self.N if n == self.node_count_states else self.N - 1
        if n not in (self.node_count_states, self.node_count_controls):
            raise ValueError("array does not match the tree size")
        return [flat[self.stage_slice(k)] for k in range(last + 1)]


def build_tree(N: int, W, p=None, node_budget: int = DEFAULT_NODE_BUDGET) -> ScenarioTree:
    """Tree of all disturbance sequences of length ``N`` drawn from ``W``."""
    W = np.asarray(W, dtype=float)
    W = W.reshape(len(W), -1)
    m = len(W)
    if m < 1 or N < 0:
        raise ValueError("need a nonempty disturbance set and N >= 0")
    if p is not None:
        p = np.asarray(p, dtype=float)
        if len(p) != m or np.max(np.abs(p - 1.0 / m)) > 1e-15:
            raise ValueError("only uniform branch probabilities are supported")
    if N * math.log(max(m, 1)) > math.log(node_budget):
        raise TreeTooLarge(f"tree with m={m}, N={N} exceeds the node budget of {node_budget}")
    n_states = geometric_count(m, N)
    if n_states > node_budget:
        raise TreeTooLarge(f"tree with {n_states} nodes exceeds the node budget of {node_budget}")
    offsets = tuple(geometric_count(m, k - 1) if k > 0 else 0 for k in range(N + 1))
    return ScenarioTree(m, N, W, offsets, n_states, geometric_count(m, N - 1) if N > 0 else 0)


def rollout_tree(tree: ScenarioTree, model, x0, u_tree, sigma: float) -> np.ndarray:
    """States at all nodes, shape ``(node_count_states, n_x)``."""
    u_tree = np.asarray(u_tree, dtype=float).reshape(tree.node_count_controls, model.n_u)
    x = np.asarray(x0, dtype=float).reshape(1, model.n_x)
    out = [x]
    for k in range(tree.N):
        u = u_tree[tree.stage_slice(k)]
        w = np.tile(sigma * tree.w_values, (len(x), 1))
        x = model.dynamics(np.repeat(x, tree.m, axis=0), np.repeat(u, tree.m, axis=0), w)
        out.append(x)
    return np.concatenate(out, axis=0)
