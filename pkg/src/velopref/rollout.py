"""Trajectory synthesis from a solved policy and Dijkstra shortest-path baselines."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .solver import SoftSolution
from .trajectories import Trajectory
from .world import N_ACTIONS, Action, World, WorldError


class UnreachableError(RuntimeError):
    pass


@dataclass
class RolloutConfig:
    mode: str = "greedy"        # "greedy" or "stochastic"
    max_steps: int = 400
    seed: int = 0

    def validate(self):
        if self.mode not in ("greedy", "stochastic"):
            raise ValueError("mode must be 'greedy' or 'stochastic'")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def rollout(world: World, solution: SoftSolution, origin: int, config: RolloutConfig,
            index: int = 0) -> Trajectory:
    """Walk from origin toward solution.goal.

    Stochastic rollouts draw from their own stream seeded by (config.seed, index),
    so a batch gives the same trajectories whether run serially or in parallel.
    Greedy rollouts take argmax Q with ties going to the lowest action index.
    """
    config.validate()
    if not 0 <= origin < world.n_states:
        raise WorldError(f"origin {origin} is not a passable state")
    goal = solution.goal
    states, actions = [origin], []
    if origin == goal:
        return Trajectory(states, actions, terminated=False, length_m=0.0)
    lengths = world.move_lengths()
    length = 0.0
    s = origin
    if config.mode == "greedy":
        seen = {origin}
        for _ in range(config.max_steps):
            a = int(np.argmax(solution.Q[s]))
            s = int(world.next_state[s, a])
            states.append(s)
            actions.append(a)
            length += lengths[a]
            if s == goal:
                return Trajectory(states, actions, terminated=True, length_m=length)
            if s in seen:   # deterministic policy revisiting a state never reaches the goal
                break
            seen.add(s)
        return Trajectory(states, actions, terminated=False, length_m=length)

    rng = np.random.default_rng([config.seed, index])
    cdf = np.cumsum(solution.policy, axis=1)
    for _ in range(config.max_steps):
        u = rng.random() * cdf[s, -1]
        a = min(int(np.searchsorted(cdf[s], u, side="right")), N_ACTIONS - 1)
        while not world.valid[s, a]:    # guards against u landing on a zero-width tail bin
            a -= 1
        s = int(world.next_state[s, a])
        states.append(s)
        actions.append(a)
        length += lengths[a]
        if s == goal:
            return Trajectory(states, actions, terminated=True, length_m=length)
    return Trajectory(states, actions, terminated=False, length_m=length)


def grid_graph(world: World) -> sparse.csr_matrix:
    """Weighted adjacency over states; cardinal moves cost cell_size, diagonals cell_size*sqrt(2)."""
    lengths = world.move_lengths()
    rows, cols, w = [], [], []
    for a in range(N_ACTIONS):
        if a == Action.ST:
            continue
        src = np.flatnonzero(world.valid[:, a])
        rows.append(src)
        cols.append(world.next_state[src, a])
        w.append(np.full(len(src), lengths[a]))
    n = world.n_states
    return sparse.csr_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))


def shortest_path(world: World, origin: int, goal: int) -> Trajectory:
    """Dijkstra over geometric move lengths; equal-length ties go to the lower cell index."""
    n = world.n_states
    for s in (origin, goal):
        if not 0 <= s < n:
            raise WorldError(f"state {s} is not passable")
    lengths = world.move_lengths()
    cell_id = world.cells[:, 0] * world.cols + world.cells[:, 1]
    dist = np.full(n, math.inf)
    pred = np.full(n, -1, dtype=np.int64)
    pred_action = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    dist[origin] = 0.0
    heap = [(0.0, int(cell_id[origin]), origin)]
    eps = 1e-9 * world.cell_size
    while heap:
        d, _, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == goal:
            break
        for a in range(N_ACTIONS - 1):
            v = int(world.next_state[u, a])
            if v < 0 or done[v]:
                continue
            nd = d + lengths[a]
            if nd < dist[v] - eps or (abs(nd - dist[v]) <= eps and cell_id[u] < cell_id[pred[v]]):
                if nd < dist[v] - eps:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, int(cell_id[v]), v))
                pred[v], pred_action[v] = u, a
    if not done[goal]:
        raise UnreachableError(f"goal {world.cell_of(goal)} is unreachable from {world.cell_of(origin)}")
    states, actions = [goal], []
    s = goal
    while s != origin:
        actions.append(int(pred_action[s]))
        s = int(pred[s])
        states.append(s)
    return Trajectory(states[::-1], actions[::-1], terminated=True, length_m=float(dist[goal]))


def path_length(world: World, traj: Trajectory) -> float:
    lengths = world.move_lengths()
    return float(sum(lengths[a] for a in traj.actions))
