"""HMM map matching of GPS points onto grid cells (Viterbi decoding)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from .rollout import grid_graph, shortest_path
from .trajectories import EARTH_RADIUS_M, haversine
from .world import World


class UnmatchedTripError(ValueError):
    pass


@dataclass
class MatchConfig:
    sigma: float = 20.0     # GPS noise, meters
    gate: float = 3.0       # candidate radius in multiples of sigma
    beta: float = 50.0      # scale of the |great-circle - network| transition penalty, meters


@dataclass
class MatchResult:
    point_states: list[int]         # Viterbi state per GPS point
    cells: list[tuple[int, int]]    # densified cell path, consecutive cells adjacent or equal
    log_prob: float


def project(world: World, points) -> np.ndarray:
    """GPS (lon, lat, ...) to local meters (x east, y south) of the world's north-west corner.

    Worlds without a geographic origin take points as local (x, y) already.
    """
    pts = np.asarray([p[:2] for p in points], dtype=np.float64)
    if world.origin_lonlat is None:
        return pts
    lon0, lat0 = world.origin_lonlat
    k = math.pi / 180 * EARTH_RADIUS_M
    x = (pts[:, 0] - lon0) * k * math.cos(math.radians(lat0))
    y = (lat0 - pts[:, 1]) * k
    return np.column_stack([x, y])


def point_gaps(world: World, points) -> np.ndarray:
    """Great-circle distance between consecutive points (plain distance in local mode)."""
    if world.origin_lonlat is None:
        xy = project(world, points)
        return np.hypot(*np.diff(xy, axis=0).T)
    return np.array([haversine(a[0], a[1], b[0], b[1]) for a, b in zip(points, points[1:])])


@dataclass
class HMMProblem:
    """Candidate states with emission and transition log-probabilities, one layer per point."""

    candidates: list[np.ndarray]
    emission: list[np.ndarray]
    transition: list[np.ndarray]    # transition[t] has shape (len(cand[t]), len(cand[t+1]))


def build_problem(points, world: World, config: MatchConfig | None = None) -> HMMProblem:
    config = config or MatchConfig()
    if len(points) < 2:
        raise ValueError("map matching needs at least 2 points")
    xy = project(world, points)
    centers = world.centers()
    radius = config.gate * config.sigma
    cands, emis = [], []
    for t, p in enumerate(xy):
        d = np.hypot(*(centers - p).T)
        c = np.flatnonzero(d <= radius)
        if c.size == 0:
            raise UnmatchedTripError(f"no candidate cell within {radius:.0f} m of point {t}")
        cands.append(c)
        emis.append(-0.5 * (d[c] / config.sigma) ** 2 - math.log(math.sqrt(2 * math.pi) * config.sigma))
    uniq = np.unique(np.concatenate(cands))
    net = csgraph.dijkstra(grid_graph(world), indices=uniq)
    row = {int(s): i for i, s in enumerate(uniq)}
    gaps = point_gaps(world, points)
    trans = []
    for t in range(len(xy) - 1):
        nd = net[[row[int(s)] for s in cands[t]]][:, cands[t + 1]]
        with np.errstate(invalid="ignore"):
            lp = -np.abs(gaps[t] - nd) / config.beta - math.log(config.beta)
        trans.append(np.where(np.isfinite(nd), lp, -np.inf))
    return HMMProblem(cands, emis, trans)


def viterbi(problem: HMMProblem) -> tuple[list[int], float]:
    """Most likely candidate index per layer; ties go to the lowest candidate index."""
    score = problem.emission[0].copy()
    back = []
    for t, trans in enumerate(problem.transition):
        total = score[:, None] + trans
        arg = np.argmax(total, axis=0)
        back.append(arg)
        score = total[arg, np.arange(total.shape[1])] + problem.emission[t + 1]
    best = float(score.max())
    if not np.isfinite(best):
        raise UnmatchedTripError("no connected candidate sequence")
    path = [int(np.argmax(score))]
    for arg in reversed(back):
        path.append(int(arg[path[-1]]))
    return path[::-1], best


def sequence_log_prob(problem: HMMProblem, path) -> float:
    lp = problem.emission[0][path[0]]
    for t, trans in enumerate(problem.transition):
        lp += trans[path[t], path[t + 1]] + problem.emission[t + 1][path[t + 1]]
    return float(lp)


def hmm_map_match(points, world: World, config: MatchConfig | None = None) -> MatchResult:
    problem = build_problem(points, world, config)
    path, lp = viterbi(problem)
    states = [int(problem.candidates[t][k]) for t, k in enumerate(path)]
    cells = [world.cell_of(states[0])]
    for a, b in zip(states, states[1:]):
        if a == b:
            cells.append(world.cell_of(b))
        else:
            cells.extend(world.cell_of(s) for s in shortest_path(world, a, b).states[1:])
    return MatchResult(states, cells, lp)
