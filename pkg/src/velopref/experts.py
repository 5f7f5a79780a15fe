"""Synthetic demonstrations: stochastic expert rollouts under a planted reward."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from .rollout import RolloutConfig, grid_graph, rollout
from .solver import SoftSolution, solve_goals
from .trajectories import Trajectory
from .world import World

log = logging.getLogger(__name__)


@dataclass
class ExpertConfig:
    n_trips: int = 2000
    n_od_pairs: int = 50
    n_heldout: int = 200
    reward_scale: float = 8.0     # planning reward = scale * planted - step_cost
    step_cost: float = 11.0
    gamma: float = 0.99
    min_od_cells: int = 5         # Chebyshev distance between origin and destination
    max_steps: int = 400
    seed: int = 0


def planning_reward(planted: np.ndarray, config: ExpertConfig) -> np.ndarray:
    """Planted rewards lie in [0, 1]; shift them negative so that trips end at their goal."""
    return config.reward_scale * np.asarray(planted) - config.step_cost


def sample_od_pairs(world: World, n: int, rng: np.random.Generator, min_cells: int,
                    exclude=frozenset()) -> tuple[list[tuple[int, int]], int]:
    """Distinct, mutually reachable OD pairs at least ``min_cells`` apart.

    Returns (pairs, rejected draws); unreachable draws are resampled and counted.
    """
    pairs, seen, rejected = [], set(exclude), 0
    cells = world.cells
    _, component = csgraph.connected_components(grid_graph(world), directed=False)
    for _ in range(1000 * max(n, 1)):
        if len(pairs) == n:
            break
        o, d = (int(v) for v in rng.integers(world.n_states, size=2))
        if (np.abs(cells[o] - cells[d]).max() < min_cells or (o, d) in seen
                or component[o] != component[d]):
            rejected += 1
            continue
        seen.add((o, d))
        pairs.append((o, d))
    if len(pairs) < n:
        raise ValueError(f"could only sample {len(pairs)} of {n} OD pairs")
    return pairs, rejected


def solve_planted(world: World, planted, goals, config: ExpertConfig) -> dict[int, SoftSolution]:
    goals = sorted(set(int(g) for g in goals))
    sols = solve_goals(world, planning_reward(planted, config), goals, config.gamma)
    return {s.goal: s for s in sols}


def generate_experts(world: World, planted, config: ExpertConfig):
    """Training trips over ``n_od_pairs`` ODs and one held-out trip per fresh OD.

    Returns (train_trajs, heldout_trajs, heldout_modes, info) where heldout_modes
    are greedy rollouts under the planted solution (the expert's modal route).
    """
    rng = np.random.default_rng(config.seed)
    if config.n_trips == 0:
        return [], [], [], {"train_od_pairs": [], "heldout_od_pairs": [], "rejected_od_draws": 0}
    train_pairs, rej1 = sample_od_pairs(world, config.n_od_pairs, rng, config.min_od_cells)
    held_pairs, rej2 = sample_od_pairs(world, config.n_heldout, rng, config.min_od_cells,
                                       exclude=frozenset(train_pairs))
    sols = solve_planted(world, planted, [d for _, d in train_pairs + held_pairs], config)
    stochastic = RolloutConfig("stochastic", config.max_steps, config.seed)
    greedy = RolloutConfig("greedy", config.max_steps, config.seed)
    train = []
    for i in range(config.n_trips):
        o, d = train_pairs[i % len(train_pairs)]
        t = rollout(world, sols[d], o, stochastic, index=i)
        t.order_id = f"expert-{i:06d}"
        train.append(t)
    held, modes = [], []
    for k, (o, d) in enumerate(held_pairs):
        t = rollout(world, sols[d], o, stochastic, index=config.n_trips + k)
        t.order_id = f"heldout-{k:06d}"
        held.append(t)
        m = rollout(world, sols[d], o, greedy)
        m.order_id = t.order_id
        modes.append(m)
    unfinished = sum(not t.terminated for t in train + held)
    if unfinished:
        log.warning("%d expert rollouts hit max_steps before reaching their goal; dropped", unfinished)
        keep = [i for i, t in enumerate(held) if t.terminated]
        held, modes = [held[i] for i in keep], [modes[i] for i in keep]
        train = [t for t in train if t.terminated]
    info = {"train_od_pairs": train_pairs, "heldout_od_pairs": held_pairs,
            "rejected_od_draws": rej1 + rej2, "unterminated": unfinished}
    return train, held, modes, info


def empirical_svf(trajs: list[Trajectory], world: World) -> np.ndarray:
    """Visits per state over every state of every trip (destination included), per trip."""
    counts = np.zeros(world.n_states)
    for t in trajs:
        np.add.at(counts, t.states, 1.0)
    return counts / max(len(trajs), 1)
