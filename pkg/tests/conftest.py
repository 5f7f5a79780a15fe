import numpy as np
import pytest

from velopref.mapmatch import MatchConfig, UnmatchedTripError, build_problem
from velopref.world import build_world


def make_world(rows, cols, blocked=(), d=2, seed=0, cell_size=100.0, origin_lonlat=None):
    n = rows * cols - len(set(blocked))
    feats = np.random.default_rng(seed).uniform(size=(n, d))
    return build_world(rows, cols, blocked, feats, cell_size, origin_lonlat)


def random_small_world(rng, max_states=8, d=2, max_rows=3, max_cols=4):
    """Connected random world with at most ``max_states`` passable cells."""
    from scipy import ndimage
    while True:
        rows, cols = int(rng.integers(1, max_rows + 1)), int(rng.integers(2, max_cols + 1))
        passable = rng.random((rows, cols)) > 0.25
        n = int(passable.sum())
        if not 2 <= n <= max_states:
            continue
        _, k = ndimage.label(passable, structure=np.ones((3, 3)))
        if k != 1:
            continue
        blocked = [tuple(c) for c in np.argwhere(~passable)]
        return build_world(rows, cols, blocked, rng.uniform(size=(n, d)))


@pytest.fixture
def open3():
    return make_world(3, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sample_trips(world, rewards, n, rng, gamma=1.0, max_steps=60):
    """Terminated stochastic rollouts of the soft policy for random OD pairs."""
    from velopref.rollout import RolloutConfig, rollout
    from velopref.solver import soft_value_iteration
    trips = []
    while len(trips) < n:
        o, g = (int(v) for v in rng.choice(world.n_states, 2, replace=False))
        sol = soft_value_iteration(world, rewards, g, gamma=gamma, tol=1e-12, method="newton")
        t = rollout(world, sol, o, RolloutConfig(mode="stochastic", max_steps=max_steps,
                                                 seed=int(rng.integers(1 << 31))))
        if t.terminated:
            trips.append(t)
    return trips


def noisy_walk(world, rng, n_points, sigma):
    s = int(rng.integers(world.n_states))
    pts = []
    for _ in range(n_points):
        r, c = world.cell_of(s)
        x, y = (c + 0.5) * world.cell_size, (r + 0.5) * world.cell_size
        pts.append((x + rng.normal(0, sigma), y + rng.normal(0, sigma)))
        nxt = world.next_state[s][world.valid[s]]
        s = int(rng.choice(nxt))
    return pts


def map_matching_instances(n, seed=2024):
    """Random small worlds with noisy GPS walks whose candidate product stays enumerable."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        world = random_small_world(rng, max_states=12, max_rows=4, max_cols=4)
        sigma = float(rng.uniform(20, 45))
        pts = noisy_walk(world, rng, int(rng.integers(2, 7)), sigma)
        cfg = MatchConfig(sigma=sigma, gate=3.0, beta=float(rng.uniform(10, 80)))
        try:
            problem = build_problem(pts, world, cfg)
        except UnmatchedTripError:
            continue
        if np.prod([len(c) for c in problem.candidates]) > 50_000:
            continue
        out.append((world, pts, cfg))
    return out
