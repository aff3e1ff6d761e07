"""Phase-I game tree: every action sequence of length <= T, states filled by the kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env import N_ACTIONS, Scenario, TransitionKernel, action_string, build_transition

MAX_NODES = 5_000_000


class TreeTooLarge(ValueError):
    pass


@dataclass(eq=False)
class GameTree:
    """Complete |A|-ary tree stored level by level.

    Node ``j`` of level ``t`` has parent ``j // 4`` at level ``t - 1`` and was
    reached by action ``j % 4``; global ids are ``offsets[t] + j``.
    """

    horizon: int
    level_states: list[np.ndarray]
    kernel: TransitionKernel

    def __post_init__(self):
        sizes = [len(s) for s in self.level_states]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.node_state = np.concatenate(self.level_states)
        self.node_depth = np.repeat(np.arange(self.horizon + 1), sizes)

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_leaves(self) -> int:
        return len(self.level_states[-1])

    @property
    def n_internal(self) -> int:
        return int(self.offsets[-2])

    def leaves(self) -> np.ndarray:
        return np.arange(self.offsets[-2], self.offsets[-1])

    def level_of(self, node: int) -> tuple[int, int]:
        t = int(self.node_depth[node])
        return t, int(node - self.offsets[t])

    def parent(self, node: int) -> int:
        t, j = self.level_of(node)
        if t == 0:
            raise ValueError("root has no parent")
        return int(self.offsets[t - 1] + j // N_ACTIONS)

    def child(self, node: int, a: int) -> int:
        t, j = self.level_of(node)
        if t == self.horizon:
            raise ValueError("leaf has no children")
        return int(self.offsets[t + 1] + j * N_ACTIONS + a)

    def actions(self, node: int) -> list[int]:
        t, j = self.level_of(node)
        out = []
        for _ in range(t):
            out.append(j % N_ACTIONS)
            j //= N_ACTIONS
        return out[::-1]

    def history(self, node: int) -> tuple[list[int], list[int]]:
        """States ``s_0..s_t`` and actions ``a_0..a_{t-1}`` leading to ``node``."""
        acts = self.actions(node)
        states = [int(self.level_states[0][0])]
        j = 0
        for t, a in enumerate(acts, start=1):
            j = j * N_ACTIONS + a
            states.append(int(self.level_states[t][j]))
        return states, acts

    def key(self, node: int) -> str:
        return action_string(self.actions(node))

    def node_from_key(self, key: str) -> int:
        j = 0
        for ch in key:
            j = j * N_ACTIONS + "UDLR".index(ch)
        return int(self.offsets[len(key)] + j)

    def leaf_index(self, node: int) -> int:
        return int(node - self.offsets[-2])


def enumerate_tree(scenario: Scenario, kernel: TransitionKernel | None = None,
                   horizon: int | None = None, max_nodes: int = MAX_NODES) -> GameTree:
    kernel = kernel if kernel is not None else build_transition(scenario, None)
    T = scenario.horizon if horizon is None else horizon
    total = sum(N_ACTIONS ** t for t in range(T + 1))
    if total > max_nodes:
        raise TreeTooLarge(f"tree with horizon {T} has {total} nodes, cap is {max_nodes}")
    levels = [np.array([kernel.index(scenario.grid.start)], dtype=np.int64)]
    for _ in range(T):
        levels.append(kernel.successor[levels[-1]].ravel())
    return GameTree(T, levels, kernel)
