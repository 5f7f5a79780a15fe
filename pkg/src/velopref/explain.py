"""Shapley attribution of the learned reward to state features."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .reward import RewardModel, reward_forward
from .trajectories import Trajectory
from .world import World

EXACT_LIMIT = 14


@dataclass
class CoalitionGame:
    """n players; ``value`` maps a boolean membership matrix (m, n) to m coalition values."""

    n: int
    value: Callable[[np.ndarray], np.ndarray]

    def __call__(self, coalition) -> float:
        mask = np.zeros((1, self.n), dtype=bool)
        mask[0, list(coalition)] = True
        return float(self.value(mask)[0])

    @classmethod
    def from_function(cls, n: int, fn: Callable[[frozenset], float]) -> "CoalitionGame":
        def value(masks):
            return np.array([fn(frozenset(np.flatnonzero(m).tolist())) for m in masks])
        return cls(n, value)


@dataclass
class ShapleyReport:
    phi: np.ndarray
    method: str                     # "exact" or "sampled"
    baseline: float                 # value of the empty coalition
    full: float                     # value of the grand coalition
    samples: int = 0
    stderr: np.ndarray | None = None
    instance: int | None = None


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(2 ** n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def exact_shapley(game: CoalitionGame) -> ShapleyReport:
    """Full enumeration with weights |S|! (n - |S| - 1)! / n!."""
    n = game.n
    if n > EXACT_LIMIT:
        raise ValueError(f"{n} players exceed the exact limit of {EXACT_LIMIT}; use sampled_shapley")
    masks = _all_masks(n)
    v = np.asarray(game.value(masks), dtype=np.float64)
    codes = np.arange(2 ** n)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
                       for k in range(n)] + [0.0])
    phi = np.zeros(n)
    for i in range(n):
        without = (codes >> i) & 1 == 0
        S = codes[without]
        phi[i] = np.sum(weight[sizes[S]] * (v[S | (1 << i)] - v[S]))
    return ShapleyReport(phi, "exact", float(v[0]), float(v[-1]))


def _permutation_marginals(game: CoalitionGame, perms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, n = perms.shape
    masks = np.zeros((m, n + 1, n), dtype=bool)
    for k in range(1, n + 1):
        masks[:, k] = masks[:, k - 1]
        masks[np.arange(m), k, perms[:, k - 1]] = True
    v = np.asarray(game.value(masks.reshape(-1, n)), dtype=np.float64).reshape(m, n + 1)
    contrib = np.empty((m, n))
    contrib[np.arange(m)[:, None], perms] = np.diff(v, axis=1)
    return contrib, v


def sampled_shapley(game: CoalitionGame, samples: int, seed: int = 0,
                    enumerate_all: bool = False, chunk: int = 2048) -> ShapleyReport:
    """Permutation-sampling estimate with per-feature standard errors.

    ``enumerate_all`` replaces sampling by every one of the n! orderings.
    """
    n = game.n
    if enumerate_all:
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    else:
        if samples < 1:
            raise ValueError("samples must be >= 1")
        rng = np.random.default_rng(seed)
        perms = np.array([rng.permutation(n) for _ in range(samples)], dtype=np.int64)
    parts, base, full = [], 0.0, 0.0
    for i in range(0, len(perms), chunk):
        c, v = _permutation_marginals(game, perms[i:i + chunk])
        parts.append(c)
        base, full = float(v[0, 0]), float(v[0, -1])
    contrib = np.concatenate(parts)
    k = len(contrib)
    stderr = contrib.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.full(n, np.inf)
    return ShapleyReport(contrib.mean(axis=0), "sampled", base, full, k, stderr)


def reward_game(model: RewardModel, instance, background) -> CoalitionGame:
    """Interventional game: features in S take the instance's values, the rest a background row's."""
    x = np.asarray(instance, dtype=np.float64)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.size == 0:
        raise ValueError("background set is empty")
    if x.shape != (model.input_dim,) or bg.shape[1] != model.input_dim:
        raise ValueError("instance and background must match the model's feature dimension")

    def value(masks, block=4096):
        masks = np.asarray(masks, dtype=bool)
        out = np.empty(len(masks))
        step = max(1, block // len(bg))
        for i in range(0, len(masks), step):
            mk = masks[i:i + step]
            rows = np.where(mk[:, None, :], x[None, None, :], bg[None, :, :])
            out[i:i + step] = reward_forward(model, rows.reshape(-1, x.size)).reshape(len(mk), len(bg)).mean(axis=1)
        return out

    return CoalitionGame(x.size, value)


def default_background(world: World, size: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(world.n_states, size=min(size, world.n_states), replace=False)
    return world.features[np.sort(idx)]


def attribute(model: RewardModel, x, background, budget: int = 1000, seed: int = 0) -> ShapleyReport:
    game = reward_game(model, x, background)
    if game.n <= EXACT_LIMIT:
        return exact_shapley(game)
    return sampled_shapley(game, budget, seed)


@dataclass
class GlobalImportance:
    phi: np.ndarray             # (states, d)
    stderr: np.ndarray | None
    method: str
    mean_abs: np.ndarray        # (d,)
    ranking: list[int]          # features by decreasing mean |phi|
    baseline: float

    def group_summary(self, groups: dict[str, list[int]]) -> dict[str, float]:
        return {name: float(self.mean_abs[idx].sum()) for name, idx in groups.items()}

    def table(self, features: np.ndarray, state_ids=None) -> list[dict]:
        rows = []
        ids = range(len(self.phi)) if state_ids is None else state_ids
        for s, sid in enumerate(ids):
            for j in range(self.phi.shape[1]):
                rows.append({"state_id": int(sid), "feature_id": j, "feature_value": float(features[s, j]),
                             "phi": float(self.phi[s, j]), "method": self.method,
                             "stderr": 0.0 if self.stderr is None else float(self.stderr[s, j])})
        return rows


def global_importance(model: RewardModel, states, background, budget: int = 1000,
                      seed: int = 0, threads: int = 1) -> GlobalImportance:
    """Shapley values for every state, exact when d <= 14, else sampled with ``budget`` permutations."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))

    def one(i):
        return attribute(model, X[i], background, budget, seed + i)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(one, range(len(X))))
    else:
        reports = [one(i) for i in range(len(X))]
    phi = np.stack([r.phi for r in reports])
    method = reports[0].method
    stderr = None if method == "exact" else np.stack([r.stderr for r in reports])
    mean_abs = np.abs(phi).mean(axis=0)
    ranking = [int(j) for j in np.argsort(-mean_abs, kind="stable")]
    return GlobalImportance(phi, stderr, method, mean_abs, ranking, reports[0].baseline)


def dependence_data(phi, features, j: int) -> list[tuple[float, float, float]]:
    """(x_j, z-scored x_j, phi_j) for every state, sorted by x_j."""
    phi = np.asarray(phi)
    features = np.asarray(features)
    if not 0 <= j < phi.shape[1]:
        raise IndexError(f"feature index {j} out of range")
    x = features[:, j]
    sd = x.std()
    z = np.zeros_like(x) if sd == 0 else (x - x.mean()) / sd
    order = np.argsort(x, kind="stable")
    return [(float(x[i]), float(z[i]), float(phi[i, j])) for i in order]


def local_trip_attribution(model: RewardModel, traj: Trajectory, world: World, background,
                           budget: int = 1000, seed: int = 0) -> list[ShapleyReport]:
    """One report per step state of the trip, tagged with its state id."""
    reports = []
    for s in traj.states[:-1] if traj.n_steps else traj.states:
        r = attribute(model, world.features[s], background, budget, seed + int(s))
        r.instance = int(s)
        reports.append(r)
    return reports
